"""Scene samples, vocabulary, synthetic corpora and region-feature files."""
from .dgrf import (FormatError, decode_region_features, encode_region_features, load_region_features,
                   read_captions, write_captions, write_region_features)
from .sample import SPLITS, SceneSample
from .synthetic import SyntheticSceneSpec, generate_corpus, parse_caption
from .vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary, build_vocab

__all__ = [
    "FormatError", "decode_region_features", "encode_region_features", "load_region_features",
    "read_captions", "write_captions", "write_region_features", "SPLITS", "SceneSample",
    "SyntheticSceneSpec", "generate_corpus", "parse_caption", "BOS_ID", "EOS_ID", "PAD_ID", "UNK_ID",
    "Vocabulary", "build_vocab",
]
