"""Frequency preference control for CNN feature maps, with a numpy training and analysis harness."""
from .advtrain import AttackConfig, TrainConfig, cutoff_schedule, fgsm, pgd, trades_loss, train
from .analysis import (
    FreqProfile, NoiseSweepReport, RobustnessReport, alpha_stats, evaluate_robustness,
    freq_noise_sweep, layer_freq_profile, w_robust,
)
from .data import Dataset, SynthSpec, batches, load_cifar10, synth_dataset
from .errors import (
    ChecksumError, ConfigError, ContractError, FormatError, FreqBiasError, IoError, ShapeError,
    SymmetryError, TrainingError, VersionError,
)
from .fpcm import CutoffState, Fpcm, FpcmParams, alpha_weights, fpcm_forward
from .model import Model, ModelConfig, build_model
from .spectral import FreqFilter, Spectrum, band_split, dft2, high_freq_norm, idft2, make_filter
from .tensorcore import Tensor, backward, no_grad

__version__ = "0.1.0"
