"""robustkit: a self-contained adversarial-robustness engine.

Numpy-backed tape autodiff, wide residual networks with input-conditioned
normalization, gradient-based attacks (FGSM, RFGSM variants, BIM, PGD),
robust training regimes (PGD adversarial, free replay, TRADES) and
loss-surface / robust-accuracy evaluation tooling.
"""

from .errors import (
    ArchitectureMismatchError,
    AttackError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    NonFiniteError,
    ParseError,
    RobustkitError,
    UsageError,
    ValidationError,
)
from .rng import Rng, substream_seed
from .tensor import (
    Tape,
    Tensor,
    backward,
    batchnorm,
    conv2d,
    dense,
    global_avg_pool,
    one_hot,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .optim import sgd_momentum_step, zero_velocity
from .models import CondNormModule, ModelGraph, WrnSpec, build_wrn, param_count, parse_arch
from .attacks import AttackConfig, Perturbation, parse_attack, perturb
from .data import Dataset, load_cifar_binary, load_idx, parse_dataset_spec, synth_dataset, write_idx
from .training import (
    TrainConfig,
    TrainReport,
    apply_tricks,
    free_m_train,
    learning_rate_at,
    natural_train,
    pgd_adv_train,
    rfgsm_train,
    trades_train,
    train,
)
from .evaluation import EvalReport, SurfaceGrid, export_large_eps, loss_surface, robust_accuracy
from .checkpoint import load_checkpoint, load_checkpoint_into, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, save_config, serialize_config

__version__ = "0.1.0"
