"""One co-distillation step and the loop around it.

Per step and per student view ``x`` (paired with the other view ``y``):

1. the teacher sees patch-dropout corrupted ``x_hat`` and ``y_hat``;
2. the teacher's semantic attention on ``x_hat`` ranks SA-grid cells;
3. the top cells (minus hints) are masked and broadcast to input tokens,
   giving the student input ``x_tilde``;
4. AMPD compares teacher(x_hat) and student(x_tilde) patch distributions on
   masked cells, AITD/GITD compare teacher(y_hat) with student(x_tilde),
   AMIP scores the student reconstruction of ``x`` on masked patches.

Only the student is optimized; the teacher follows by EMA.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .config import TrainConfig, config_dict, config_from_dict
from .distill import (HEAD_KEYS, LossBundle, aitd_loss, amip_loss, ampd_loss, ema_update, gitd_loss,
                      momentum_schedule, sharpen, teacher_state_for, teacher_temperature, total_loss,
                      update_center)
from .errors import CorruptCheckpointError, NumericError, ValidationError
from .masking import (MaskStrategy, MaskVector, attention_guided_mask, blockwise_mask, broadcast_mask,
                      pool_mask, random_mask, stack_visible)
from .model import SmartNet, forward_encoder
from .phantoms import ViewPair, phantom_set, sample_views

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class StepRecord:
    step: int
    amip: float
    ampd: float
    aitd: float
    gitd: float
    total: float
    momentum: float
    lr: float
    wall_time: float = 0.0

    def key(self) -> tuple:
        """Everything except wall time, for replay comparisons."""
        return (self.step, self.amip, self.ampd, self.aitd, self.gitd, self.total, self.momentum, self.lr)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` then cosine decay to ``cfg.min_lr``."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    warm, total = cfg.warmup_steps, cfg.total_steps
    if step < warm:
        return cfg.lr * step / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


def make_batch(cfg: TrainConfig, step: int) -> list[ViewPair]:
    d = cfg.data
    rng = step_rng(cfg.seed, step, 0)
    vols = phantom_set(cfg.batch_size, int(rng.integers(2 ** 31)), grid_size=d.phantom_size,
                       n_structures=d.n_structures, structure_classes=d.classes,
                       intensity_contrast=d.contrast, size_range=(d.size_min, d.size_max))
    return [sample_views(v, d.crop_size, rng, augment=d.augment, shift=d.shift, scale=d.scale,
                         normalize=d.normalize) for v in vols]


def _param_groups(net):
    decay, no_decay = [], []
    for name, p in net.named_parameters():
        if p.ndim <= 1 or name.endswith(("pos_embed", "cls_token", "mask_token", "rel_bias")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class ViewTargets:
    """Teacher-side quantities for one student view (no autograd)."""
    voxels: torch.Tensor
    student_masks: list
    stage3_masked: torch.Tensor
    t_patch_logits: torch.Tensor
    t_cls_logits: torch.Tensor
    t_global_logits: torch.Tensor


class Pretrainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        torch.manual_seed(cfg.seed)
        self.student = SmartNet(cfg.model).to(self.dtype)
        self.student.train()
        self.teacher = copy.deepcopy(self.student)
        self.teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.tstate = teacher_state_for(self.teacher, cfg.model.head_dim_K, cfg.total_steps)
        self.optimizer = torch.optim.AdamW(_param_groups(self.student), lr=cfg.lr,
                                           betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        self.step = 0
        self.input_grid = cfg.model.input_grid
        self.sa_grid = cfg.model.stage_grid(cfg.model.sa_stage)
        self.stage3_grid = cfg.model.stage_grid(3)

    # ------------------------------------------------------------ masking
    def student_masks(self, satt: torch.Tensor, drops: list, rng) -> list:
        m = self.cfg.masking
        n_sa = int(np.prod(self.sa_grid))
        out = []
        for b in range(satt.shape[0]):
            if m.strategy == "attention":
                exclude = None
                if self.cfg.dropped_positions == "exclude":
                    exclude = pool_mask(drops[b], self.input_grid, self.sa_grid).masked_idx
                coarse = attention_guided_mask(satt[b].detach().double().cpu().numpy(), m, exclude)
            elif m.strategy == "random":
                coarse = random_mask(n_sa, m.r, rng)
            else:
                edge = min(m.block_edge, *self.sa_grid)
                coarse = blockwise_mask(self.sa_grid, m.r, edge, rng)
            out.append(broadcast_mask(coarse, self.sa_grid, self.input_grid))
        return out

    def teacher_drop(self, batch_size: int, rng) -> list:
        n = int(np.prod(self.input_grid))
        drops = []
        for _ in range(batch_size):
            d = random_mask(n, self.cfg.masking.r_t, rng)
            d.strategy = MaskStrategy.PATCH_DROPOUT
            drops.append(d)
        return drops

    # ------------------------------------------------------------ step pieces
    def prepare(self, batch: list[ViewPair], rng) -> list[ViewTargets]:
        """Teacher forwards and student masks for every student view of the step."""
        u = torch.as_tensor(np.stack([p.u for p in batch])).to(self.dtype)
        v = torch.as_tensor(np.stack([p.v for p in batch])).to(self.dtype)
        views = {"u": u, "v": v}
        drops = {k: self.teacher_drop(len(batch), rng) for k in views}
        t_out = {k: forward_encoder(self.teacher, x, torch.as_tensor(stack_visible(drops[k])), "teacher")
                 for k, x in views.items()}
        with torch.no_grad():
            logits = {k: (self.teacher.project_patch_tokens(o.stage3_tokens.tokens),
                          self.teacher.project_cls(o.sa.cls_embedding),
                          self.teacher.project_global(o.global_token)) for k, o in t_out.items()}
        self._teacher_logits = logits
        pairs = [("u", "v"), ("v", "u")] if self.cfg.symmetrize else [("u", "v")]
        targets = []
        for x, y in pairs:
            src = x if self.cfg.satt_source == "u" else y
            masks = self.student_masks(t_out[src].sa.satt, drops[src], rng)
            stage3 = [pool_mask(m, self.input_grid, self.stage3_grid) for m in masks]
            targets.append(ViewTargets(views[x], masks, ~torch.as_tensor(stack_visible(stage3)),
                                       logits[x][0], logits[y][1], logits[y][2]))
        return targets

    def losses(self, targets: list[ViewTargets], step: Optional[int] = None) -> LossBundle:
        """Differentiable loss bundle (averaged over student views) for prepared targets."""
        cfg = self.cfg
        step = self.step if step is None else step
        tau_t = teacher_temperature(step, cfg.total_steps, cfg.sharpen)
        tau_s = cfg.sharpen.tau_s
        c = self.tstate.center
        acc = {k: 0.0 for k in ("amip", "ampd", "aitd", "gitd")}
        for t in targets:
            visible = torch.as_tensor(stack_visible(t.student_masks))
            s = forward_encoder(self.student, t.voxels, visible, "student")
            p_s_patch = sharpen(self.student.project_patch_tokens(s.stage3_tokens.tokens), tau_s)
            p_s_cls = sharpen(self.student.project_cls(s.sa.cls_embedding), tau_s)
            p_s_g = sharpen(self.student.project_global(s.global_token), tau_s)
            acc["ampd"] = acc["ampd"] + ampd_loss(sharpen(t.t_patch_logits, tau_t, c["patch"]),
                                                  p_s_patch, t.stage3_masked)
            acc["aitd"] = acc["aitd"] + aitd_loss(sharpen(t.t_cls_logits, tau_t, c["cls"]), p_s_cls)
            acc["gitd"] = acc["gitd"] + gitd_loss(sharpen(t.t_global_logits, tau_t, c["global"]), p_s_g)
            acc["amip"] = acc["amip"] + amip_loss(s.reconstruction, t.voxels, ~visible, cfg.model.patch)
        n = len(targets)
        return total_loss(acc["amip"] / n, acc["ampd"] / n, acc["aitd"] / n, acc["gitd"] / n, cfg.loss)

    def pretrain_step(self, batch: Optional[list[ViewPair]] = None) -> StepRecord:
        cfg = self.cfg
        t0 = time.perf_counter()
        step = self.step
        if batch is None:
            batch = make_batch(cfg, step)
        torch.manual_seed(int(np.random.SeedSequence([cfg.seed, step, 2]).generate_state(1)[0]))
        rng = step_rng(cfg.seed, step, 1)
        targets = self.prepare(batch, rng)
        lr = lr_schedule(step, cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        try:
            bundle = self.losses(targets, step)
        except NumericError as exc:
            stats = {k: (float(t.voxels.mean()), float(t.voxels.std())) for k, t in zip("uv", targets)}
            raise NumericError(f"step {step}: {exc}; input mean/sd per view {stats}") from exc
        self.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()
        if cfg.clip_grad > 0:
            torch.nn.utils.clip_grad_norm_(self.student.parameters(), cfg.clip_grad)
        self.optimizer.step()
        lam = momentum_schedule(min(step, self.tstate.total_steps), self.tstate.total_steps,
                                cfg.momentum_start)
        ema_update(self.tstate, self.student, lam)
        m = cfg.sharpen.center_momentum
        for k, idx in (("patch", 0), ("cls", 1), ("global", 2)):
            both = torch.cat([self._teacher_logits[v][idx].reshape(-1, cfg.model.head_dim_K)
                              for v in ("u", "v")])
            update_center(self.tstate, both, m, k)
        self.step += 1
        f = bundle.as_floats()
        return StepRecord(step, f["amip"], f["ampd"], f["aitd"], f["gitd"], f["total"], lam, lr,
                          time.perf_counter() - t0)

    def run(self, steps: Optional[int] = None, records_path=None, callback=None) -> list[StepRecord]:
        """Run ``steps`` more steps (default: up to the configured total)."""
        steps = self.cfg.total_steps - self.step if steps is None else steps
        out = []
        fh = open(records_path, "a") if records_path else None
        try:
            for _ in range(steps):
                rec = self.pretrain_step()
                out.append(rec)
                if fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        return out

    # ------------------------------------------------------------ checkpointing
    def state_tensors(self) -> tuple[dict, dict]:
        tensors = {}
        for name, p in self.student.named_parameters():
            tensors[f"student/{name}"] = p.detach()
        for name, p in self.teacher.named_parameters():
            tensors[f"teacher/{name}"] = p.detach()
        for k in HEAD_KEYS:
            tensors[f"center/{k}"] = self.tstate.center[k]
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for k, v in st.items():
                tensors[f"optim/{idx}/{k}"] = torch.as_tensor(v)
        tensors["rng/torch"] = torch.get_rng_state()
        groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
                  for g in opt["param_groups"]]
        meta = {"config": config_dict(self.cfg), "step": self.step, "optim_groups": groups,
                "teacher_step": self.tstate.step}
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state_tensors()
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Pretrainer":
        tensors, meta = load_tensors(path)
        try:
            trainer = cls(config_from_dict(meta["config"]))
            trainer.student.load_state_dict(_strip(tensors, "student/"), strict=False)
            trainer.teacher.load_state_dict(_strip(tensors, "teacher/"), strict=False)
            for k in HEAD_KEYS:
                trainer.tstate.center[k] = tensors[f"center/{k}"].clone()
            state = {}
            for name, t in tensors.items():
                if name.startswith("optim/"):
                    _, idx, key = name.split("/", 2)
                    state.setdefault(int(idx), {})[key] = t
            groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()}
                      for g in meta["optim_groups"]]
            trainer.optimizer.load_state_dict({"state": state, "param_groups": groups})
            torch.set_rng_state(tensors["rng/torch"])
        except KeyError as exc:
            raise CorruptCheckpointError(f"{path}: missing entry {exc}") from None
        trainer.step = int(meta["step"])
        trainer.tstate.step = int(meta["teacher_step"])
        _check_loaded(trainer, tensors)
        return trainer


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _check_loaded(trainer: Pretrainer, tensors: dict):
    for prefix, net in (("student/", trainer.student), ("teacher/", trainer.teacher)):
        names = {n for n, _ in net.named_parameters()}
        stored = set(_strip(tensors, prefix))
        if names != stored:
            raise CorruptCheckpointError(f"{prefix} parameter names differ: {sorted(names ^ stored)[:5]}")


def load_encoder(path, role: str = "teacher") -> tuple[SmartNet, TrainConfig]:
    """Rebuild one network from a checkpoint (the EMA teacher by default)."""
    tensors, meta = load_tensors(path)
    cfg = config_from_dict(meta["config"])
    net = SmartNet(cfg.model).to(DTYPES[cfg.dtype])
    params = _strip(tensors, f"{role}/")
    if not params:
        raise CorruptCheckpointError(f"{path}: no {role} parameters")
    missing = {n for n, _ in net.named_parameters()} ^ set(params)
    if missing:
        raise CorruptCheckpointError(f"{path}: parameter names differ: {sorted(missing)[:5]}")
    net.load_state_dict(params, strict=False)
    net.eval()
    return net, cfg
