"""Bi-temporal point-cloud change detection at desk scale.

A Siamese encoder-decoder with vector-attention self and cross
transformer layers over dynamic feature-space graphs, trained end to end
on a minimal numpy reverse-mode engine, with a synthetic scene generator,
a cloud-to-cloud baseline, and the usual segmentation metric suite.
"""

from .cloud import LabeledPointCloud, load_cloud, save_cloud
from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionMatrix, MetricReport, c2c_baseline, confusion, metrics
from .model import ChangeNetWeights, NetConfig, forward, init_weights, load_model, save_model
from .synth import SceneSpec, generate_scene
from .train import TrainConfig, fit, infer_scene

__version__ = "0.1.0"

__all__ = [
    "LabeledPointCloud", "load_cloud", "save_cloud",
    "ConfigError", "DataError", "NumericError",
    "ConfusionMatrix", "MetricReport", "c2c_baseline", "confusion", "metrics",
    "ChangeNetWeights", "NetConfig", "forward", "init_weights",
    "load_model", "save_model",
    "SceneSpec", "generate_scene",
    "TrainConfig", "fit", "infer_scene",
    "__version__",
]
