"""Joint decomposition and classification of multi-polarization radar chips.

Modules: ``layers`` (numpy conv/pool/dense primitives with manual gradients),
``model`` (network, joint loss, training), ``synth`` (synthetic chips and
datasets), ``sparse`` (OMP/SOMP and the SRC baseline), ``evaluation`` (SNR,
accuracy, CSV/SVG) and ``cli``.
"""
from .model import (NetworkConfig, NetworkParams, TrainConfig, decompose, init_params,
                    predict_label, predict_proba, sdcn_loss, train)
from .synth import Dataset, build_test_set, build_training_set, select_channels

__version__ = "0.1.0"

__all__ = ["NetworkConfig", "NetworkParams", "TrainConfig", "decompose", "init_params",
           "predict_label", "predict_proba", "sdcn_loss", "train", "Dataset", "build_test_set",
           "build_training_set", "select_channels"]
