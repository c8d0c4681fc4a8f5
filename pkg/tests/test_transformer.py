"""Encoder/decoder contracts, attention hand cases and decoding search."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualgcn import tensor as T
from dualgcn.data_io.vocab import BOS_ID, EOS_ID
from dualgcn.decoding import _log_softmax, beam_search, generate, greedy, model_step_fn
from dualgcn.model import Batch, CaptionModel, ModelConfig
from dualgcn.nn import Adam, Linear
from dualgcn.tensor import Tape, Tensor, precision
from dualgcn.transformer import (MultiHeadAttention, TransformerDecoder, TransformerEncoder, causal_mask,
                                 sinusoidal_encoding, word_distribution)

from test_model_gradients import tiny_batch


def small_model(mode="Dual-GCN", decoder="transformer", vocab=9, seed=0, **kw):
    cfg = ModelConfig(feature_dim=6, max_regions=4, d_g=8, d_model=8, d_embed=8, n_layers=2, n_heads=2, K=2,
                      encoder_mode=mode, decoder=decoder, **kw)
    return CaptionModel(cfg, vocab_size=vocab, seed=seed), cfg


# -- input projection and attention -------------------------------------------------

def test_input_projection_cases():
    rng = np.random.default_rng(0)
    lin = Linear(rng, 4, 4)
    x = rng.normal(size=(3, 4))
    lin.weight.data[:] = np.eye(4)
    lin.bias.data[:] = 0.0
    np.testing.assert_allclose(lin(Tensor(x)).data, x, rtol=1e-6)
    lin.weight.data[:] = 0.0
    assert not lin(Tensor(x)).data.any()
    lin = Linear(rng, 4, 3)
    with precision(np.float64):
        out = lin(Tensor(x)).data
    np.testing.assert_allclose(out, x @ lin.weight.data + lin.bias.data, rtol=1e-6)


def test_single_position_attention_is_value_path():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        mha = MultiHeadAttention(rng, 4, 2)
        x = rng.normal(size=(1, 1, 4))
        out = mha(Tensor(x), Tensor(x), Tensor(x)).data
    want = x[0] @ mha.w_v.data @ mha.out.weight.data + mha.out.bias.data
    np.testing.assert_allclose(out[0], want, rtol=1e-12)


def test_identical_keys_split_attention_evenly():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        mha = MultiHeadAttention(rng, 4, 1)
        q = Tensor(rng.normal(size=(1, 1, 4)))
        k = np.repeat(rng.normal(size=(1, 1, 4)), 2, axis=1)
        v = rng.normal(size=(1, 2, 4))
        out = mha(q, Tensor(k), Tensor(v)).data
    want = v[0].mean(axis=0) @ mha.w_v.data @ mha.out.weight.data + mha.out.bias.data
    np.testing.assert_allclose(out[0, 0], want, rtol=1e-12)


def test_scalar_attention_hand_case():
    with precision(np.float64):
        mha = MultiHeadAttention(np.random.default_rng(0), 1, 1)
        mha.w_q.data[:] = 2.0
        mha.w_k.data[:] = 0.5
        mha.w_v.data[:] = 3.0
        mha.out.weight.data[:] = 1.0
        mha.out.bias.data[:] = 0.0
        x = Tensor([[[1.0], [2.0]]])
        out = mha(x, x, x).data[0, :, 0]
    # q = 2x, k = x/2, v = 3x, scores = x_i * x_j
    for i, xi in enumerate((1.0, 2.0)):
        s = np.array([xi * 1.0, xi * 2.0])
        w = np.exp(s) / np.exp(s).sum()
        assert out[i] == pytest.approx(w @ np.array([3.0, 6.0]), rel=1e-12)


def test_attention_masks_and_errors():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(rng, 4, 2)
    x = Tensor(rng.normal(size=(1, 3, 4)))
    with pytest.raises(ValueError):
        mha(x, x, x, np.zeros((1, 3, 3), dtype=bool))
    with pytest.raises(ValueError):
        mha(x, x, Tensor(rng.normal(size=(1, 2, 4))))
    with pytest.raises(ValueError):
        MultiHeadAttention(rng, 5, 2)
    # a masked key has no influence on the output
    keep = np.array([[[True, True, False]]])
    other = x.data.copy()
    other[0, 2] += 10.0
    a = mha(x, x, x, keep).data
    b = mha(x, Tensor(other), Tensor(other), keep).data
    np.testing.assert_array_equal(a, b)


# -- encoder -----------------------------------------------------------------------

def test_empty_encoder_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    assert TransformerEncoder(np.random.default_rng(0), 4, 0, 2)(x) is x


@pytest.mark.parametrize("o", [1, 5, 36])
def test_encoder_shape(o):
    enc = TransformerEncoder(np.random.default_rng(0), 8, 2, 2)
    assert enc(Tensor(np.ones((1, o, 8)))).shape == (1, o, 8)


def test_encoder_permutation_equivariance():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        enc = TransformerEncoder(rng, 8, 2, 2)
        x = rng.normal(size=(2, 6, 8))
        mask = np.ones((2, 6), dtype=bool)
        mask[1, 4:] = False
        perm = rng.permutation(6)
        out = enc(Tensor(x), mask).data
        out_p = enc(Tensor(x[:, perm]), mask[:, perm]).data
    np.testing.assert_allclose(out_p[0], out[0][perm], atol=1e-12)
    valid = mask[1, perm]
    np.testing.assert_allclose(out_p[1][valid], out[1][perm][valid], atol=1e-12)


# -- decoder -----------------------------------------------------------------------

def test_position_zero_encoding():
    pe = sinusoidal_encoding(3, 6)
    assert pe[0, 0::2].tolist() == [0.0] * 3
    assert pe[0, 1::2].tolist() == [1.0] * 3
    assert pe[2, 0] == pytest.approx(math.sin(2.0))


def test_causal_mask_shape():
    assert causal_mask(3).tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_decoder_causality_is_exact():
    rng = np.random.default_rng(5)
    dec = TransformerDecoder(rng, 11, 8, 2, 2)
    memory = Tensor(rng.normal(size=(1, 4, 8)))
    ids = np.array([[BOS_ID, 4, 5, 6, 7, 8]])
    base = dec(memory, ids).data
    for t in range(1, ids.shape[1]):
        changed = ids.copy()
        changed[0, t:] = rng.integers(4, 11, size=ids.shape[1] - t)
        out = dec(memory, changed).data
        np.testing.assert_array_equal(out[0, :t], base[0, :t])


def test_decoder_distribution_and_errors():
    rng = np.random.default_rng(6)
    dec = TransformerDecoder(rng, 7, 8, 1, 2, d_embed=5)
    memory = Tensor(rng.normal(size=(2, 3, 8)))
    logits = dec(memory, np.array([[BOS_ID, 4], [BOS_ID, 5]]))
    assert logits.shape == (2, 2, 7)
    np.testing.assert_allclose(word_distribution(logits).data.sum(-1), 1.0, atol=1e-6)
    with pytest.raises(IndexError):
        dec(memory, np.array([[BOS_ID, 7]]))


def test_word_distribution_cases():
    uniform = word_distribution(Tensor(np.zeros((2, 5)))).data
    np.testing.assert_allclose(uniform, 0.2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6))
    p = word_distribution(Tensor(x)).data
    assert (p.argmax(1) == word_distribution(Tensor(x + 4.0)).data.argmax(1)).all()
    np.testing.assert_array_equal(p, T.softmax(Tensor(x), axis=-1).data)


# -- decoding search -----------------------------------------------------------------

def table_step(table):
    """Next-token log-probs keyed by the generated prefix (without ``<bos>``)."""
    def step(prefix):
        return np.stack([table[tuple(int(t) for t in p[1:])] for p in prefix])
    return step


def random_table(rng, v, max_len):
    table = {}
    for n in range(max_len):
        for prefix in itertools.product(range(v), repeat=n):
            table[prefix] = _log_softmax(rng.normal(scale=2.0, size=v))
    return table


def exhaustive_best(table, v, max_len):
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(v), repeat=n):
            if EOS_ID in seq[:-1] or (n < max_len and seq[-1] != EOS_ID):
                continue
            score = sum(table[seq[:i]][seq[i]] for i in range(n))
            if best is None or score > best[0]:
                best = (score, list(seq))
    return best


def test_hand_table_beam_two():
    # vocab {a=0, b=1, eos=2}; greedy takes "a" then is forced into a poor tail
    lp = {(): np.log([0.5, 0.4, 0.1]),
          (0,): np.log([0.34, 0.33, 0.33]), (1,): np.log([0.05, 0.05, 0.9]),
          (0, 0): np.log([0.3, 0.3, 0.4]), (0, 1): np.log([0.3, 0.3, 0.4])}
    for pre in itertools.product(range(3), repeat=2):
        lp.setdefault(pre, np.log([0.3, 0.3, 0.4]))
    lp.setdefault((2,), np.log([1 / 3] * 3))
    best = beam_search(table_step(lp), 2, 3)
    score, seq = exhaustive_best(lp, 3, 3)
    assert best.tokens[1:] == seq == [1, 2]
    assert best.score == pytest.approx(score)
    assert greedy(table_step(lp), 1, 3)[0].tokens[1:] == [0, 0, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 4), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_wide_beam_matches_exhaustive_enumeration(v, max_len, seed):
    table = random_table(np.random.default_rng(seed), v, max_len)
    beam = v ** max(max_len - 1, 1)
    best = beam_search(table_step(table), beam, max_len)
    score, seq = exhaustive_best(table, v, max_len)
    assert best.score == pytest.approx(score, abs=1e-12)
    assert best.tokens == [BOS_ID] + seq


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 5), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_beam_one_is_greedy(v, max_len, seed):
    table = random_table(np.random.default_rng(seed), v, max_len)
    g = greedy(table_step(table), 1, max_len)[0]
    b = beam_search(table_step(table), 1, max_len)
    assert b.tokens == g.tokens
    assert b.logprobs == g.logprobs


def test_max_len_one_emits_one_token():
    table = random_table(np.random.default_rng(0), 4, 1)
    assert len(beam_search(table_step(table), 3, 1).tokens) == 2
    assert len(greedy(table_step(table), 1, 1)[0].tokens) == 2
    with pytest.raises(ValueError):
        beam_search(table_step(table), 0, 1)


def test_model_beam_matches_exhaustive_on_tiny_vocab():
    with precision(np.float64):
        model, cfg = small_model(vocab=4, seed=2)
        batch = tiny_batch(np.random.default_rng(1), cfg, n_images=1)
        memory, mask = model.encode(batch)

        def lp_of(prefix):
            logits = model.logits(memory, mask, np.array([[BOS_ID] + list(prefix)])).data[0, -1]
            return _log_softmax(logits)

        table = {p: lp_of(p) for n in range(3) for p in itertools.product(range(4), repeat=n)}
        score, seq = exhaustive_best(table, 4, 3)
        best = generate(model, batch, max_len=3, beam_width=16)[0]
    assert best.tokens == [BOS_ID] + seq
    assert best.score == pytest.approx(score, abs=1e-9)


def test_model_beam_one_equals_greedy():
    model, cfg = small_model(vocab=12, seed=3)
    batch = tiny_batch(np.random.default_rng(2), cfg)
    g = generate(model, batch, max_len=6, beam_width=1)
    for r in range(2):
        sub = Batch(batch.ids[r:r + 1], batch.feats[r:r + 1], batch.mask[r:r + 1], batch.adj[r:r + 1],
                    batch.nb_emb[r:r + 1], batch.nb_counts[r:r + 1])
        b = beam_search(model_step_fn(model, *model.encode(sub), 0), 1, 6)
        assert b.tokens == g[r].tokens


def test_caption_invariant_to_region_order():
    model, cfg = small_model(vocab=12, seed=4)
    batch = tiny_batch(np.random.default_rng(3), cfg)
    perm = np.array([2, 0, 3, 1])
    shuffled = Batch(batch.ids, batch.feats[:, perm], batch.mask[:, perm], batch.adj[:, :, perm][:, :, :, perm],
                     batch.nb_emb, batch.nb_counts)
    a = [s.tokens for s in generate(model, batch, max_len=8)]
    b = [s.tokens for s in generate(model, shuffled, max_len=8)]
    assert a == b


# -- optimisation smoke test ---------------------------------------------------------

@pytest.mark.parametrize("decoder", ["transformer", "recurrent"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_sample_overfit(decoder, seed):
    cfg = ModelConfig(feature_dim=16, max_regions=4, d_g=32, d_model=32, d_embed=32, n_layers=2, n_heads=2, K=2,
                      encoder_mode="Dual-GCN", decoder=decoder)
    model = CaptionModel(cfg, vocab_size=12, seed=seed)
    batch = tiny_batch(np.random.default_rng(seed), cfg, n_images=1)
    caption = [[4, 7, 5, 9, 6]]
    opt = Adam(model.state_dict(), lr=1e-2, warmup_steps=0)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        with Tape() as tape:
            loss = model.loss(batch, caption, train=False)
        tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] <= 0.05
    assert generate(model, batch, max_len=8)[0].words() == caption[0]
