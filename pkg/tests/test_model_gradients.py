"""End-to-end gradient checks through tiny caption models in 64-bit mode.

Each composite runs object GCN -> fusion -> transformer encoder -> decoder ->
cross-entropy, and checks every parameter against finite differences.

Two oracles are used. The three-point central difference at h=1e-5 carries a
truncation error of about h^2 * f'''(x) / 6, roughly 1e-11 absolute, which is
more than a 1e-6 relative budget allows on coordinates whose gradient is below
~1e-5 (attention query/key weights sit there at initialisation). The five-point
stencil at the same base step, evaluated on an extended-precision twin of the
model, removes that floor and is the oracle the tape gradients are held to.
"""
import numpy as np
import pytest

from dualgcn.gradcheck import analytic_gradients, grad_check, max_relative_error, numeric_gradients
from dualgcn.graph_encoder import Region, build_spatial_graph
from dualgcn.model import Batch, CaptionModel, ModelConfig
from dualgcn.tensor import precision

TOL = 1e-6
CAPTIONS = [[4, 5, 6], [6, 4]]
EXTENDED = np.finfo(np.longdouble).eps < np.finfo(np.float64).eps


def tiny_batch(rng, cfg: ModelConfig, n_images=2):
    o, c = cfg.max_regions, cfg.feature_dim
    feats = np.zeros((n_images, o, c))
    mask = np.zeros((n_images, o), dtype=bool)
    adj = np.zeros((n_images, 12, o, o))
    for b in range(n_images):
        m = o - b  # unequal region counts exercise the padding mask
        regions = []
        for _ in range(m):
            x, y = rng.uniform(0, 60, 2)
            w, h = rng.uniform(8, 30, 2)
            regions.append(Region(rng.normal(size=c), (x, y, x + w, y + h), 1.0))
        g = build_spatial_graph(regions, o, image_size=(100.0, 100.0))
        feats[b, :m] = [r.feature for r in regions]
        mask[b, :m] = True
        adj[b] = g.adjacency(o)
    batch = Batch(np.arange(n_images), feats, mask, adj)
    d = cfg.d_g if cfg.encoder_mode == "Dual-GCN" else c
    batch.nb_emb = rng.normal(size=(n_images, cfg.K, d))
    batch.nb_counts = np.array([cfg.K, cfg.K - 1])[:n_images]
    return batch


COMPOSITES = {
    "dual_gcn_transformer": dict(encoder_mode="Dual-GCN", decoder="transformer"),
    "gcn_obj_pool_transformer": dict(encoder_mode="GCN_obj&F_img", decoder="transformer"),
    "dual_gcn_recurrent": dict(encoder_mode="Dual-GCN", decoder="recurrent"),
}


def build_composite(name, dtype=np.float64):
    with precision(dtype):
        rng = np.random.default_rng(11)
        cfg = ModelConfig(feature_dim=5, max_regions=3, d_g=4, d_model=4, d_embed=3, n_layers=1, n_heads=2,
                          K=2, **COMPOSITES[name])
        model = CaptionModel(cfg, vocab_size=7, seed=3)
        batch = tiny_batch(rng, cfg)
    return model, batch


def central_difference_error(name):
    model, batch = build_composite(name)
    with precision(np.float64):
        params = model.parameters()
        assert all(p.data.dtype == np.float64 for p in params)
        return grad_check(lambda: model.loss(batch, CAPTIONS, train=False), params, h=1e-5)


def five_point_error(name):
    model, batch = build_composite(name)
    with precision(np.float64):
        analytic = analytic_gradients(lambda: model.loss(batch, CAPTIONS, train=False), model.parameters())
    twin, twin_batch = build_composite(name, np.longdouble)
    with precision(np.longdouble):
        for p, q in zip(model.parameters(), twin.parameters()):
            q.data = p.data.astype(np.longdouble)
        numeric = numeric_gradients(lambda: twin.loss(twin_batch, CAPTIONS, train=False), twin.parameters(),
                                    h=1e-5, points=5)
    return max_relative_error(analytic, numeric)


@pytest.mark.skipif(not EXTENDED, reason="needs a long double wider than float64")
@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_matches_five_point_oracle(name):
    assert five_point_error(name) <= TOL


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_central_difference(name):
    assert central_difference_error(name) <= TOL
