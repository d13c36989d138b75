"""Denoising diffusion over stroke parameters, driven by a logSNR schedule.

Noise is applied only to the rows a mask marks as targets; context rows pass
through untouched, enter the model through their own channel, and are copied
verbatim into the final sample. Guidance combines three model branches
(unconditional, context-only, context+class) into one noise estimate.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .masking import split
from .strokes import StrokeSequence

SCHEDULE_SHAPES = ("linear", "cosine")


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Maps step t in {1..T} to a signal-to-noise level, high SNR at t=1."""

    timesteps: int = 1000
    logsnr_min: float = -15.0
    logsnr_max: float = 15.0
    shape: str = "linear"

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not self.logsnr_max > self.logsnr_min:
            raise ValueError("logsnr_max must exceed logsnr_min")
        if self.shape not in SCHEDULE_SHAPES:
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    def logsnr_at(self, t):
        """logSNR at step t; t=1 gives logsnr_max, t=T gives logsnr_min."""
        t = np.asarray(t)
        if (t < 1).any() or (t > self.timesteps).any():
            raise ValueError(f"step out of range 1..{self.timesteps}")
        if self.timesteps == 1:
            u = np.zeros_like(t, dtype=np.float64)
        else:
            u = (t - 1) / (self.timesteps - 1)
        if self.shape == "cosine":
            u = 0.5 * (1.0 - np.cos(np.pi * u))
        out = self.logsnr_max + (self.logsnr_min - self.logsnr_max) * u
        return out if out.shape else float(out)

    def alpha_bar(self, t):
        """Cumulative signal fraction; defined as exactly 1 at t=0."""
        t = np.asarray(t)
        out = np.ones(t.shape, dtype=np.float64)
        live = t >= 1
        if live.any():
            out[live] = 1.0 / (1.0 + np.exp(-np.asarray(self.logsnr_at(t[live]))))
        return out if out.shape else float(out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        return cls(**doc)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, broadcast over leading dims."""
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray | None,
              schedule: NoiseSchedule, prev_t: int | None = None) -> np.ndarray:
    """One ancestral step from t to prev_t (default t-1; 0 means fully clean).

    Posterior mean uses the effective per-step alpha between the two levels;
    the variance is the standard DDPM posterior variance. z must be None or 0
    on the final step.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if prev_t is None:
        prev_t = t - 1
    if not 0 <= prev_t < t:
        raise ValueError("prev_t must be in [0, t)")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(prev_t)
    alpha = ab_t / ab_prev
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    mean = (x_t - ((1.0 - alpha) / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha)
    if z is None:
        return mean
    var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha)
    return mean + math.sqrt(max(var, 0.0)) * np.asarray(z, dtype=np.float64)


def _model_eps(model, s_p_t, s_ctx, mask, class_ids, logsnr) -> np.ndarray:
    out = model(s_p_t, s_ctx, mask, class_ids, logsnr)
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)


def mc_cfg_noise(model, x_t: np.ndarray, class_ids, s_ctx: np.ndarray, mask: np.ndarray,
                 logsnr, s1: float = 1.5, s2: float = 1.5) -> np.ndarray:
    """Guided noise estimate from three stacked branches.

    Branch rows, in order: (no class, no context), (no class, context),
    (class, context). Result: b1 + s1*(b2 - b1) + s2*(b3 - b2). The
    no-context branch sees an all-zero context and an all-zero mask.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    B, L, C = x_t.shape
    s_ctx = np.broadcast_to(np.asarray(s_ctx, dtype=np.float64), (B, L, C))
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (B, L))
    ids = list(np.atleast_1d(class_ids)) if not isinstance(class_ids, (list, tuple)) else list(class_ids)
    if len(ids) == 1 and B > 1:
        ids = ids * B
    logsnr = np.broadcast_to(np.atleast_1d(np.asarray(logsnr, dtype=np.float64)), (B,))

    stacked_x = np.concatenate([x_t, x_t, x_t], axis=0)
    stacked_ctx = np.concatenate([np.zeros_like(s_ctx), s_ctx, s_ctx], axis=0)
    stacked_mask = np.concatenate([np.zeros_like(mask), mask, mask], axis=0)
    stacked_ids = [None] * B + [None] * B + list(ids)
    stacked_logsnr = np.concatenate([logsnr, logsnr, logsnr])

    eps = _model_eps(model, stacked_x, stacked_ctx, stacked_mask, stacked_ids, stacked_logsnr)
    b1, b2, b3 = eps[:B], eps[B:2 * B], eps[2 * B:]
    out = b1 + s1 * (b2 - b1) + s2 * (b3 - b2)
    return out[0] if single else out


def training_loss(model, strokes: np.ndarray, mask: np.ndarray, class_ids, rng: np.random.Generator,
                  schedule: NoiseSchedule, p_drop: float = 0.1,
                  t=None, noise: np.ndarray | None = None) -> Tensor:
    """Masked noise-prediction loss on a batch of (already normalized) strokes.

    Context rows are never noised and carry no loss weight; class labels drop
    to the null token with probability p_drop. t and noise can be pinned for
    deterministic tests.
    """
    strokes = np.asarray(strokes, dtype=np.float64)
    if strokes.ndim == 2:
        strokes = strokes[None]
    B, L, C = strokes.shape
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (B, L))
    if (mask.min(axis=1) == 1).any():
        raise ValueError("mask with no target rows: resample the mask")

    ctx, target = split(strokes.reshape(B * L, C), mask.reshape(B * L))
    ctx = ctx.reshape(B, L, C)
    target = target.reshape(B, L, C)

    if t is None:
        t = rng.integers(1, schedule.timesteps + 1, B)
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (B,))
    if noise is None:
        noise = rng.standard_normal((B, L, C))
    pred_rows = (1.0 - mask)[..., None]
    x_t = forward_noise(target, t, noise, schedule) * pred_rows

    ids = list(np.atleast_1d(class_ids)) if not isinstance(class_ids, (list, tuple)) else list(class_ids)
    if len(ids) == 1 and B > 1:
        ids = ids * B
    ids = [None if (c is None or rng.uniform() < p_drop) else c for c in ids]

    pred = model(x_t, ctx, mask, ids, schedule.logsnr_at(t))
    residual = pred + Tensor((-noise * pred_rows).astype(pred.dtype))
    weighted = ag.square(residual) * Tensor(pred_rows.astype(pred.dtype))
    denom = float(pred_rows.sum() * C)
    return weighted.sum() * (1.0 / denom)


def sampling_steps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending sub-schedule of `steps` timesteps covering [1, T]."""
    if not 1 <= steps <= schedule.timesteps:
        raise ValueError("steps must be in [1, timesteps]")
    taus = np.unique(np.round(np.linspace(1, schedule.timesteps, steps)).astype(np.int64))
    return taus[::-1]


def sample(model, s_ctx, mask, class_id, rng: np.random.Generator,
           schedule: NoiseSchedule | None = None, steps: int = 70,
           s1: float = 1.5, s2: float = 1.5) -> np.ndarray:
    """Complete the masked rows of a sequence by ancestral denoising.

    s_ctx is raw (unnormalized) context, zero at target rows; the result
    carries the context rows through bit-exactly and clamps generated rows to
    valid stroke ranges. Accepts a single (L,8) sequence or a (B,L,8) batch.
    """
    if schedule is None:
        schedule = NoiseSchedule()
    s_ctx = np.asarray(s_ctx, dtype=np.float64)
    single = s_ctx.ndim == 2
    if single:
        s_ctx = s_ctx[None]
    B, L, C = s_ctx.shape
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (B, L))
    keep = mask[..., None]

    mu = getattr(model, "norm_mu", np.zeros(C))
    sigma = getattr(model, "norm_sigma", np.ones(C))
    ctx_n = ((s_ctx - mu) / sigma) * keep

    x = rng.standard_normal((B, L, C)) * (1.0 - keep)
    taus = sampling_steps(schedule, steps)
    with ag.no_grad():
        for idx, t in enumerate(taus):
            prev = int(taus[idx + 1]) if idx + 1 < len(taus) else 0
            logsnr = schedule.logsnr_at(int(t))
            eps_hat = mc_cfg_noise(model, x, [class_id] * B, ctx_n, mask,
                                   np.full(B, logsnr), s1, s2)
            z = rng.standard_normal((B, L, C)) if prev > 0 else None
            x = ddpm_step(x, eps_hat, int(t), z, schedule, prev_t=prev)
            x *= 1.0 - keep

    out = x * sigma + mu
    out[..., 0:2] = np.clip(out[..., 0:2], 0.0, 1.0)
    out[..., 2:4] = np.clip(out[..., 2:4], 1e-4, 1.0)
    out[..., 4:] = np.clip(out[..., 4:], 0.0, 1.0)
    out = out * (1.0 - keep) + s_ctx * keep
    return out[0] if single else out


def complete_sequence(model, seq: StrokeSequence, class_id, seed: int,
                      schedule: NoiseSchedule | None = None, steps: int = 70,
                      s1: float = 1.5, s2: float = 1.5) -> StrokeSequence:
    """Fill every unoccupied slot of a sequence; occupied rows are context."""
    mask = seq.occupancy.astype(np.float64)
    rng = np.random.default_rng(seed)
    strokes = sample(model, seq.strokes, mask, class_id, rng, schedule, steps, s1, s2)
    out = seq.copy()
    out.strokes[:] = strokes
    out.occupancy[:] = 1
    return out
