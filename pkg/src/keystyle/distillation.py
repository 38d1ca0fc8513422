"""Noise schedule, guidance conditions, the controlled score-distillation loss
and the direct guidance-matching baseline.

Step indices follow the user-facing convention: ``t = 0`` is the noisiest of
the 30 sampler steps and ``t = 29`` the cleanest. :class:`NoiseSchedule` keeps
the mapping to the underlying 1000-step training timesteps.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Protocol

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .core import SCHEDULE_STEPS, BackendError, ConfigError, ContractError, ImagePlane


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha_bar: np.ndarray
    timesteps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (SCHEDULE_STEPS,):
            raise ScheduleError(f"expected {SCHEDULE_STEPS} steps, got {ab.shape}")
        if not np.all(np.diff(ab) > 0):
            raise ScheduleError("alpha_bar must be strictly increasing in t")
        if not (0 < ab[0] <= 0.05 and 0.95 <= ab[-1] < 1):
            raise ScheduleError(f"alpha_bar endpoints out of range: {ab[0]:.4g}, {ab[-1]:.4g}")

    def __len__(self):
        return SCHEDULE_STEPS

    def __getitem__(self, t: int) -> float:
        check_step(t)
        return float(self.alpha_bar[t])


def check_step(t: int) -> int:
    if not (isinstance(t, (int, np.integer)) and 0 <= t < SCHEDULE_STEPS):
        raise ContractError(f"step index must be an integer in [0, {SCHEDULE_STEPS - 1}], got {t!r}")
    return int(t)


def build_schedule(num_inference_steps: int = SCHEDULE_STEPS, num_train_timesteps: int = 1000,
                   beta_start: float = 0.00085, beta_end: float = 0.012,
                   beta_schedule: str = "scaled_linear", sampler: str = "UniPCMultistepScheduler") -> NoiseSchedule:
    """Tabulate alpha_bar at the sampler's 30 inference timesteps.

    Defaults reproduce the Stable Diffusion 1.5 training schedule (scaled-linear
    betas over 1000 steps) sampled with linspace spacing, as a UniPC sampler
    configured for 30 steps would visit it.
    """
    if num_inference_steps != SCHEDULE_STEPS:
        raise ContractError(f"the step convention is fixed at {SCHEDULE_STEPS} steps")
    if beta_schedule == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps, dtype=np.float64) ** 2
    elif beta_schedule == "linear":
        betas = np.linspace(beta_start, beta_end, num_train_timesteps, dtype=np.float64)
    else:
        raise ConfigError(f"unknown beta_schedule {beta_schedule!r}")
    alphas_cumprod = np.cumprod(1.0 - betas)
    # noisiest first, so index 0 is the first sampler step
    timesteps = np.linspace(0, num_train_timesteps - 1, num_inference_steps + 1).round()[::-1][:-1].astype(np.int64)
    meta = {
        "beta_schedule": beta_schedule,
        "beta_start": beta_start,
        "beta_end": beta_end,
        "num_train_timesteps": num_train_timesteps,
        "timestep_spacing": "linspace",
        "sampler": sampler,
    }
    return NoiseSchedule(alphas_cumprod[timesteps], timesteps, meta)


def mix_with_alpha(y_hat: torch.Tensor, eps: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    if y_hat.shape != eps.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} does not match image shape {tuple(y_hat.shape)}")
    return alpha_bar ** 0.5 * y_hat + (1.0 - alpha_bar) ** 0.5 * eps.to(y_hat.dtype)


def mix_noise(y_hat: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule, t: int) -> torch.Tensor:
    """``sqrt(ab_t) * y_hat + sqrt(1 - ab_t) * eps``."""
    return mix_with_alpha(y_hat, eps, sched[t])


def noise_like(shape, seed: int, step: int, frame: int, stream: int = 0,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard normal noise from a counter-based generator keyed by (seed, stream, step, frame)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream), int(step), int(frame)])
    rng = np.random.Generator(np.random.Philox(ss))
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


# guidance functions

class GuidanceFunction:
    """Deterministic frame -> condition map; callable on ``(1, 3, H, W)`` tensors."""

    kind: str = ""
    channels: int = 1
    differentiable: bool = False

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def parameters_digest(self) -> bytes:
        return b""

    def condition(self, x: ImagePlane) -> ImagePlane:
        with torch.no_grad():
            return ImagePlane.from_tensor(self(x.to_tensor()).clamp(0.0, 1.0))


class CannyGuidance(GuidanceFunction):
    """Binary Canny edge map of the 8-bit RGB frame (OpenCV hysteresis thresholds)."""

    kind = "canny"

    def __init__(self, low_threshold: int = 100, high_threshold: int = 200):
        self.low_threshold = low_threshold
        self.high_threshold = high_threshold

    def edges(self, rgb_u8: np.ndarray) -> np.ndarray:
        return cv2.Canny(np.ascontiguousarray(rgb_u8), self.low_threshold, self.high_threshold) > 0

    def __call__(self, x):
        out = []
        for img in x.detach():
            u8 = np.rint(img.clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).astype(np.uint8)
            out.append(torch.from_numpy(self.edges(u8).astype(np.float32)))
        return torch.stack(out)[:, None].to(x.dtype)


_LUMA = (0.299, 0.587, 0.114)
_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_SCALE = 4.0 * 2 ** 0.5  # largest possible magnitude for inputs in [0, 1]


class SobelGuidance(GuidanceFunction):
    """Luminance Sobel gradient magnitude scaled into ``[0, 1]``; differentiable.

    Borders use replicate padding.
    """

    kind = "toy"
    differentiable = True

    def __init__(self, eps: float = 1e-14):
        self.eps = eps

    def __call__(self, x):
        luma = torch.tensor(_LUMA, dtype=x.dtype).view(1, 3, 1, 1)
        y = (x * luma).sum(1, keepdim=True)
        kx = torch.tensor(_SOBEL_X, dtype=x.dtype)
        k = torch.stack([kx, kx.T])[:, None]
        g = F.conv2d(F.pad(y, (1, 1, 1, 1), mode="replicate"), k)
        return torch.sqrt((g ** 2).sum(1, keepdim=True) + self.eps) / SOBEL_SCALE


def guidance_condition(g: GuidanceFunction, x: ImagePlane) -> ImagePlane:
    return g.condition(x)


class GuidanceCache:
    """Per-frame condition cache; ``calls`` counts evaluations of the guidance function."""

    def __init__(self, g: GuidanceFunction):
        self.g = g
        self.calls = 0
        self._cache: dict[int, ImagePlane] = {}
        self._lock = threading.Lock()

    def get(self, index: int, x: ImagePlane) -> ImagePlane:
        with self._lock:
            if index not in self._cache:
                self.calls += 1
                self._cache[index] = self.g.condition(x)
            return self._cache[index]


# score distillation

class GuidedDenoiser(Protocol):
    name: str
    prompt: str
    condition_kind: str

    def __call__(self, z: torch.Tensor, cond: torch.Tensor, t: int) -> torch.Tensor:
        """Predict the noise in ``z`` at step ``t`` given the condition image."""


def sds_weight(sched: NoiseSchedule, t: int, weighting: str = "sqrt_alpha_bar") -> float:
    if weighting == "sqrt_alpha_bar":
        return sched[t] ** 0.5
    if weighting == "unit":
        return 1.0
    raise ConfigError(f"unknown SDS weighting {weighting!r}")


def _as_tensor(x, dtype=None):
    if isinstance(x, ImagePlane):
        return x.to_tensor(dtype or torch.float32)
    return x if x.ndim == 4 else x.unsqueeze(0)


def loss_csds(d: GuidedDenoiser, sched: NoiseSchedule, t: int, y_hat, cond, eps,
              weighting: str = "sqrt_alpha_bar") -> tuple[torch.Tensor, torch.Tensor]:
    """Controlled score distillation at a fixed step ``t``.

    Returns ``(value, grad)``: ``value`` is the mean squared residual between the
    predicted and injected noise, ``grad = w(t) * (d - eps)`` is the update
    direction for ``y_hat``. The denoiser is evaluated without autograd; no
    derivative of it is ever requested.
    """
    check_step(t)
    y_hat = _as_tensor(y_hat)
    eps = _as_tensor(eps).to(y_hat.dtype)
    cond = _as_tensor(cond, y_hat.dtype)
    with torch.no_grad():
        z = mix_noise(y_hat.detach(), eps, sched, t)
        pred = d(z, cond, t)
        if pred.shape != z.shape:
            raise BackendError(f"denoiser {getattr(d, 'name', d)!r} returned shape {tuple(pred.shape)}, "
                               f"expected {tuple(z.shape)}")
        if not torch.isfinite(pred).all():
            raise BackendError(f"denoiser {getattr(d, 'name', d)!r} produced non-finite output at t={t}")
        resid = pred.to(y_hat.dtype) - eps
        value = torch.mean(resid ** 2)
        grad = sds_weight(sched, t, weighting) * resid
    return value, grad


def csds_surrogate(y_hat: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Scalar whose derivative with respect to ``y_hat`` is exactly ``grad``."""
    return (grad.detach() * y_hat).sum()


def loss_lineart(g: GuidanceFunction, y_hat, x, target_condition: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared difference between guidance maps of the prediction and the frame."""
    if not g.differentiable:
        raise ConfigError(f"guidance kind {g.kind!r} is not differentiable; the matching baseline needs one that is")
    y_hat = _as_tensor(y_hat)
    if target_condition is None:
        with torch.no_grad():
            target_condition = g(_as_tensor(x, y_hat.dtype))
    pred = g(y_hat)
    if pred.shape != target_condition.shape:
        raise ContractError("prediction and frame shapes differ")
    return torch.mean((pred - target_condition.to(pred.dtype)) ** 2)
