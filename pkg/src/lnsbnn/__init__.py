"""Binary CNNs whose binary weights come from learned per-layer mapping networks.

The mapping networks are trained against the pretrained signs, treated as
labels with class-conditional flip noise, through an unbiased corrected
squared loss. Inference runs on bit-packed weights with an XOR/popcount
convolution.
"""

from .binarize import BitTensor, binary_conv2d, pack, sign, sign_ste, unpack
from .config import ConfigError, ExperimentConfig, parse_config
from .data import AugmentSpec, Dataset, augment, batch_iter, load_idx
from .estimator import BinaryNetClassifier
from .export import export_binary, load_exported
from .mapping import MappingNet, mapping_binarize, mapping_forward, warm_start
from .metrics import MetricsRecord, read_metrics, write_metrics
from .model import InferenceModel, LayerSpec, ModelSpec, desk4
from .noisy_loss import NoiseRates, corrected_loss, corrected_loss_grad, flip_noise_simulate, mse_label_loss
from .train import (
    Checkpoint,
    DivergenceError,
    TrainConfig,
    evaluate,
    flip_rate,
    lns_finetune,
    pretrain_baseline,
    simple_finetune,
    total_loss,
)

__version__ = "0.1.0"
