"""Desk-scale toolkit for measuring how adversarial robustness scales with training compute.

Modules: ``tensor`` (autodiff), ``models``, ``attacks``, ``train``, ``cost``,
``scaling``, ``predictor``, ``data``, ``harness`` and ``cli``.
"""

from ._kernels import USE_NUMBA
from .attacks import AttackConfig, pgd, robust_accuracy
from .cost import energy_from_power, train_flops
from .data import gen_blobs
from .models import ArchSpec, build, count_forward_flops, count_params, parse_arch
from .scaling import envelope, extrapolate, fit_power_law
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA", "AttackConfig", "pgd", "robust_accuracy", "energy_from_power", "train_flops", "gen_blobs",
    "ArchSpec", "build", "count_forward_flops", "count_params", "parse_arch", "envelope", "extrapolate",
    "fit_power_law", "TrainConfig",
]  # fmt: skip
