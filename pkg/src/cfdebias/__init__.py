"""Spurious-correlation latching analysis with classifier-supervised counterfactuals."""

from .forge import ArtifactSpec, DiseaseMarkerSpec, ForgeConfig, ImageRecord, SubgroupPlan, build_synthetic_dataset
from .classifiers import BinaryClassifier, TrainConfig, train_artifact_detector, train_erm, train_group_dro
from .counterfactual import GANConfig, generate_counterfactual, train_counterfactual_gan
from .metrics import actionability, aggregate, cpg, scls, ssim

__version__ = "0.1.0"
