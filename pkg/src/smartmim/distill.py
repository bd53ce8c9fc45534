"""Sharpening, centering, the four co-distillation losses and the EMA teacher."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError, ValidationError
from .masking import MaskVector, from_blocks

LOG_CLAMP = 1e-12
HEAD_KEYS = ("cls", "global", "patch")


@dataclass
class SharpenConfig:
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup: float = 0.1  # fraction of total steps
    center_momentum: float = 0.9

    def __post_init__(self):
        if min(self.tau_s, self.tau_t_start, self.tau_t_end) <= 0:
            raise ValidationError("temperatures must be > 0")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValidationError("center_momentum must lie in [0, 1)")
        if not 0.0 <= self.tau_t_warmup <= 1.0:
            raise ValidationError("tau_t_warmup must lie in [0, 1]")


@dataclass
class LossWeights:
    ampd: float = 0.1
    aitd: float = 0.1
    gitd: float = 0.1


@dataclass
class LossBundle:
    amip: torch.Tensor
    ampd: torch.Tensor
    aitd: torch.Tensor
    gitd: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("amip", "ampd", "aitd", "gitd", "total")}


@dataclass
class TeacherState:
    """EMA parameters (shared storage with the teacher module), centers and schedule position."""

    params: dict
    center: dict = field(default_factory=dict)
    step: int = 0
    total_steps: int = 1


def teacher_state_for(net, head_dim: int, total_steps: int) -> TeacherState:
    ref = next(net.parameters())
    center = {k: torch.zeros(head_dim, dtype=ref.dtype) for k in HEAD_KEYS}
    return TeacherState(dict(net.named_parameters()), center, 0, total_steps)


# ---------------------------------------------------------------- sharpening

def sharpen(logits: torch.Tensor, tau: float, center: Optional[torch.Tensor] = None) -> torch.Tensor:
    """softmax((logits - center) / tau) over the last axis."""
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    if center is not None:
        logits = logits - center
    return F.softmax(logits / tau, dim=-1)


def teacher_temperature(step: int, total_steps: int, cfg: SharpenConfig) -> float:
    warm = int(round(cfg.tau_t_warmup * total_steps))
    if warm <= 0 or step >= warm:
        return cfg.tau_t_end
    return cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * step / warm


def update_center(state: TeacherState, teacher_logits: torch.Tensor, momentum: float,
                  key: str = "cls") -> TeacherState:
    """center <- m * center + (1 - m) * batch mean of ``teacher_logits``."""
    logits = teacher_logits.detach()
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite teacher logits passed to update_center")
    batch_mean = logits.reshape(-1, logits.shape[-1]).mean(dim=0)
    old = state.center.get(key)
    if old is None:
        old = torch.zeros_like(batch_mean)
    state.center[key] = momentum * old + (1.0 - momentum) * batch_mean
    return state


# ---------------------------------------------------------------- losses

def _check_prob(p: torch.Tensor, name: str):
    sums = p.sum(dim=-1)
    if not torch.all(torch.abs(sums - 1.0) <= 1e-4):
        raise ValidationError(f"{name} rows do not sum to 1 (max deviation "
                              f"{float(torch.abs(sums - 1.0).max()):.3g})")


def cross_entropy(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    """Per-row -sum p_t log p_s with the teacher side detached."""
    return -(p_t.detach() * torch.log(p_s.clamp_min(LOG_CLAMP))).sum(dim=-1)


def aitd_loss(p_t_cls: torch.Tensor, p_s_cls: torch.Tensor) -> torch.Tensor:
    _check_prob(p_t_cls, "teacher [CLS] distribution")
    _check_prob(p_s_cls, "student [CLS] distribution")
    if p_t_cls.shape != p_s_cls.shape:
        raise ShapeError(f"{tuple(p_t_cls.shape)} vs {tuple(p_s_cls.shape)}")
    return cross_entropy(p_t_cls, p_s_cls).mean()


def gitd_loss(p_t_g: torch.Tensor, p_s_g: torch.Tensor) -> torch.Tensor:
    _check_prob(p_t_g, "teacher global distribution")
    _check_prob(p_s_g, "student global distribution")
    if p_t_g.shape != p_s_g.shape:
        raise ShapeError(f"{tuple(p_t_g.shape)} vs {tuple(p_s_g.shape)}")
    return cross_entropy(p_t_g, p_s_g).mean()


def _masked_flags(mask, n: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, MaskVector):
        flags = ~torch.as_tensor(mask.visible)
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskVector):
        flags = ~torch.as_tensor(np.stack([m.visible for m in mask]))
    else:
        flags = torch.as_tensor(mask).bool()
    if flags.shape[-1] != n:
        raise ShapeError(f"mask covers {flags.shape[-1]} tokens, expected {n}")
    return flags.to(like.device)


def ampd_loss(p_t_patch: torch.Tensor, p_s_patch: torch.Tensor, mask) -> torch.Tensor:
    """Mean row cross-entropy over masked stage-3 tokens; 0 when nothing is masked.

    ``mask`` is a MaskVector, a list of them (one per batch row) or a boolean
    tensor of *masked* flags broadcastable to ``p_s_patch.shape[:-1]``.
    """
    if p_t_patch.shape != p_s_patch.shape:
        raise ShapeError(f"{tuple(p_t_patch.shape)} vs {tuple(p_s_patch.shape)}")
    flags = _masked_flags(mask, p_s_patch.shape[-2], p_s_patch)
    flags = flags.expand(p_s_patch.shape[:-1])
    if not flags.any():
        return p_s_patch.sum() * 0.0
    return cross_entropy(p_t_patch, p_s_patch)[flags].mean()


def amip_loss(reconstruction: torch.Tensor, target: torch.Tensor, mask, patch_size: int) -> torch.Tensor:
    """Mean absolute reconstruction error over voxels of masked input patches."""
    if reconstruction.shape != target.shape:
        raise ShapeError(f"{tuple(reconstruction.shape)} vs {tuple(target.shape)}")
    grid = tuple(s // patch_size for s in target.shape[-3:])
    if any(s % patch_size for s in target.shape[-3:]):
        raise ShapeError(f"grid {tuple(target.shape[-3:])} not divisible by patch {patch_size}")
    n = grid[0] * grid[1] * grid[2]
    flags = _masked_flags(mask, n, target)
    vox = from_blocks(flags[..., None].expand(*flags.shape, patch_size ** 3), grid, patch_size)
    vox = vox.expand(target.shape)
    if not vox.any():
        return reconstruction.sum() * 0.0
    return (reconstruction - target.detach()).abs()[vox].mean()


def total_loss(amip, ampd, aitd, gitd, weights: LossWeights = LossWeights()) -> LossBundle:
    parts = [x if torch.is_tensor(x) else torch.tensor(float(x), dtype=torch.float64)
             for x in (amip, ampd, aitd, gitd)]
    if not all(torch.isfinite(p).all() for p in parts):
        raise NumericError("non-finite loss component: " + ", ".join(
            f"{k}={float(p)}" for k, p in zip(("amip", "ampd", "aitd", "gitd"), parts)))
    amip, ampd, aitd, gitd = parts
    total = amip + weights.ampd * ampd + weights.aitd * aitd + weights.gitd * gitd
    return LossBundle(amip, ampd, aitd, gitd, total, weights)


# ---------------------------------------------------------------- EMA teacher

def momentum_schedule(step: int, total_steps: int, start: float = 0.996) -> float:
    """Cosine ramp of the EMA momentum from ``start`` at step 0 to 1 at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - start) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def _param_map(obj) -> Mapping:
    if isinstance(obj, TeacherState):
        return obj.params
    if hasattr(obj, "named_parameters"):
        return dict(obj.named_parameters())
    return obj


@torch.no_grad()
def ema_update(teacher: TeacherState, student, lam: float) -> TeacherState:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, in place; increments the step."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"momentum {lam} outside [0, 1]")
    sp = _param_map(student)
    if set(sp) != set(teacher.params):
        missing = set(teacher.params) ^ set(sp)
        raise ShapeError(f"parameter sets differ: {sorted(missing)[:5]}")
    for name, t in teacher.params.items():
        s = sp[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        t.mul_(lam).add_(s.detach().to(t.dtype), alpha=1.0 - lam)
    teacher.step += 1
    return teacher
