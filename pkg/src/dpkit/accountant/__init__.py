"""Privacy accounting for DP-SGD: RDP and numerical PRV composition, noise calibration."""

from dpkit.accountant.calibration import (
    CIFAR10_TRAIN_SIZE,
    NoiseMultiplier,
    PrivacySpec,
    SubsampleSchedule,
    calibrate_noise,
    epsilon_of,
)
from dpkit.accountant.prv import PrvBounds, SubsampledGaussianPrv, prv_epsilon, prv_epsilon_bounds
from dpkit.accountant.rdp import (
    DEFAULT_ORDERS,
    RdpCurve,
    compose,
    rdp_curve,
    rdp_epsilon,
    rdp_gaussian,
    rdp_subsampled_gaussian,
    rdp_to_epsilon,
)

__all__ = [
    "CIFAR10_TRAIN_SIZE",
    "DEFAULT_ORDERS",
    "NoiseMultiplier",
    "PrivacySpec",
    "PrvBounds",
    "RdpCurve",
    "SubsampleSchedule",
    "SubsampledGaussianPrv",
    "calibrate_noise",
    "compose",
    "epsilon_of",
    "prv_epsilon",
    "prv_epsilon_bounds",
    "rdp_curve",
    "rdp_epsilon",
    "rdp_gaussian",
    "rdp_subsampled_gaussian",
    "rdp_to_epsilon",
]
