"""Dense correspondence from unsupervised patch features and a layered truncated-L1 MRF."""

from .dictionary import (
    Dictionary,
    learn_dictionary,
    learn_kmeans,
    learn_ksvd,
    learn_random,
    load_dictionary,
    save_dictionary,
)
from .encode import EncoderConfig, build_grid_pyramid, encode_image, max_pool
from .evaluate import BoundingBox, iou, loc_err, lt_acc, transfer_labels, warp_image
from .matching import FlowField, MatchParams, MatchResult, TranslationDomain, match
from .preprocess import (
    WhiteningTransform,
    apply_whitening,
    extract_random_patches,
    fit_whitening,
    load_image,
    normalize_patches,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Dictionary",
    "EncoderConfig",
    "FlowField",
    "MatchParams",
    "MatchResult",
    "TranslationDomain",
    "WhiteningTransform",
    "apply_whitening",
    "build_grid_pyramid",
    "encode_image",
    "extract_random_patches",
    "fit_whitening",
    "iou",
    "learn_dictionary",
    "learn_kmeans",
    "learn_ksvd",
    "learn_random",
    "load_dictionary",
    "load_image",
    "loc_err",
    "lt_acc",
    "match",
    "max_pool",
    "normalize_patches",
    "save_dictionary",
    "transfer_labels",
    "warp_image",
]
