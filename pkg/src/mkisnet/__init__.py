"""Multi-kernel convolutional segmentation network on a small numpy autodiff engine."""
from .backend import NAME as BACKEND
from .data import AugmentedDataset, Sample, augment_training_set, load_manifest, pad_to_multiple
from .evaluation import confusion, evaluate_dataset, metrics_from_counts, roc_auc
from .model import Model, ModelConfig, build_model, complexity_report, load_model, save_model
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, median_frequency_weights, resume, train

__version__ = "0.1.0"
