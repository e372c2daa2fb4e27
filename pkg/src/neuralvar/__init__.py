"""Noise-perturbed training (virtual weight perturbations with exact
de-noising) for small classifiers, plus flatness and continual-learning
evaluators."""

from .autodiff import (
    DimensionError,
    NumericError,
    ParameterSet,
    StaleTapeError,
    Tape,
    Tensor,
    backward,
    finite_diff_grad,
)
from .data import Dataset, TaskSequence, load_idx
from .models import FcnConfig, accuracy, fcn_init, forward_loss, predict
from .optim import (
    AdamState,
    NoiseSpec,
    NvrmState,
    SgdState,
    adam_step,
    nvrm_finalize,
    nvrm_step,
    psgd_step,
    sample_noise,
    sgd_step,
    with_clean_weights,
)

__version__ = "0.1.0"
