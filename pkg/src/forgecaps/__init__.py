"""Capsule-network toolkit for detecting forged face images and videos."""

from .archive import ArchiveError, WeightArchive, load_archive, save_archive
from .capsnet import (
    CapsuleHeadSpec,
    CapsuleModel,
    Prediction,
    RoutingConfig,
    RoutingState,
    load_checkpoint,
    loss,
    predict,
    route,
    save_checkpoint,
    stats_pool,
)
from .data import DataError, Sample, SampleManifest, load_image, make_synthetic, preprocess
from .extractor import ToyExtractor, VggFrontExtractor, build_vgg_front, make_extractor
from .pipeline import (
    ConfusionCounts,
    EvalReport,
    NumericalError,
    TrainConfig,
    aggregate_video,
    evaluate,
    seed_streams,
    train,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
