"""Forward-noising schedule and composite-loss math for latent enhancement.

A standalone numeric kernel: the denoiser, decoder and segmentator that a
trained pipeline would supply are passed in as plain callables, so every
formula here is testable with linear stand-ins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class LatentGrid:
    """(h, w, c) tensor of latent values."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ParameterError(f"latent must be (h, w, c), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("latent values must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention factors for a variance-preserving process.

    ``alpha_bar[t-1]`` is the factor for step t in 1..T; values are strictly
    decreasing and lie in (0, 1].
    """

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ParameterError("alpha_bar must be a nonempty 1-D array")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ParameterError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size

    def at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ParameterError(f"t must be in [1, {self.T}], got {t}")
        return float(self.alpha_bar[t - 1])

    @staticmethod
    def linear_beta(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        """Standard linear-beta schedule; the default with T = 1000 steps."""
        if T < 1:
            raise ParameterError("T must be positive")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return NoiseSchedule(np.cumprod(1.0 - betas))


def _check_same_shape(a: LatentGrid, b: LatentGrid, what: str) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add_noise(z0: LatentGrid, eps: LatentGrid, t: int, sched: NoiseSchedule) -> LatentGrid:
    """Noisy latent at step t: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    _check_same_shape(z0, eps, "add_noise")
    ab = sched.at(t)
    return LatentGrid(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data)


def recover_z0(zt: LatentGrid, eps_hat: LatentGrid, t: int, sched: NoiseSchedule) -> LatentGrid:
    """Invert add_noise given a noise estimate: (zt - sqrt(1-ab)*eps_hat)/sqrt(ab)."""
    _check_same_shape(zt, eps_hat, "recover_z0")
    ab = sched.at(t)
    return LatentGrid((zt.data - np.sqrt(1.0 - ab) * eps_hat.data) / np.sqrt(ab))


def concat_latents(zt: LatentGrid, z_rec: LatentGrid) -> LatentGrid:
    """Channel-axis concatenation; (h, w, c1) + (h, w, c2) -> (h, w, c1+c2)."""
    if zt.shape[:2] != z_rec.shape[:2]:
        raise ParameterError(f"spatial shapes differ: {zt.shape[:2]} vs {z_rec.shape[:2]}")
    return LatentGrid(np.concatenate([zt.data, z_rec.data], axis=2))


def noise_loss(eps: LatentGrid, eps_hat: LatentGrid) -> float:
    """Mean squared error between true and predicted noise."""
    _check_same_shape(eps, eps_hat, "noise_loss")
    diff = eps.data - eps_hat.data
    return float(np.mean(diff * diff))


def pixel_loss(x_hat: np.ndarray, x_gt: np.ndarray) -> float:
    """Mean absolute error in pixel space."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if x_hat.shape != x_gt.shape:
        raise ParameterError(f"pixel_loss: shapes {x_hat.shape} and {x_gt.shape} differ")
    return float(np.mean(np.abs(x_hat - x_gt)))


def anatomy_loss(seg_logits: np.ndarray, seg_gt_labels: np.ndarray) -> float:
    """Mean categorical cross entropy of per-voxel class scores vs label ids.

    ``seg_logits`` has shape (..., K); ``seg_gt_labels`` the matching (...)
    integer array with values in [0, K).
    """
    logits = np.asarray(seg_logits, dtype=np.float64)
    labels = np.asarray(seg_gt_labels)
    if logits.ndim < 1 or logits.shape[:-1] != labels.shape:
        raise ParameterError(
            f"anatomy_loss: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"label ids must lie in [0, {k})")
    # log-softmax, stabilized
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_prob, labels[..., None].astype(np.int64), axis=-1)
    return float(-np.mean(picked))


def composite_loss(l_n: float, l_p: float, l_s: float, lambda_p: float = 1.0, lambda_s: float = 0.001) -> float:
    """Weighted training objective: noise term plus weighted pixel and anatomy terms."""
    for name, val in (("l_n", l_n), ("l_p", l_p), ("l_s", l_s)):
        if not np.isfinite(val) or val < 0:
            raise ParameterError(f"{name} must be finite and nonnegative, got {val}")
    return float(l_n + lambda_p * l_p + lambda_s * l_s)
