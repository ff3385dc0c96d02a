"""Inherently interpretable CNN classifiers with class evidence maps.

Includes a small numpy autodiff engine, black-box and evidence-map heads, ElasticNet
training, post-hoc saliency baselines and localization/faithfulness metrics.
"""

from .autodiff import Tape, Tensor, backward
from .estimators import BlackBoxCNNClassifier, SoftCAMClassifier
from .models import BackboneConfig, ModelBundle, convert_head, init_weights, to_softcam
from .saliency import MethodId, SaliencyMap, explain
from .synthdata import SynthConfig, generate_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BlackBoxCNNClassifier", "MethodId", "ModelBundle", "SaliencyMap",
    "SoftCAMClassifier", "SynthConfig", "Tape", "Tensor", "TrainConfig", "backward",
    "convert_head", "explain", "generate_dataset", "init_weights", "to_softcam", "train",
]
