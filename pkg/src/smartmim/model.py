"""3D shifted-window transformer with a semantic-attention ([CLS] query) block.

Layout inside the network is channels-last ``(B, D, H, W, C)``. Masking
happens at the input-token level by swapping embedded tokens for a learned
[MASK] vector, so every stage keeps a dense grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError, ValidationError
from .masking import TokenGrid, to_blocks, from_blocks

N_STAGES = 4


@dataclass
class ModelConfig:
    img_size: int = 32
    base_embed: int = 24
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 2, 4, 8)
    window: int = 4
    patch: int = 2
    sa_stage: int = 3
    sa_depth: int = 2
    sa_heads: int = 0
    head_dim_K: int = 256
    drop_path: float = 0.1
    mlp_ratio: float = 4.0
    layerscale_init: float = 1e-4

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != N_STAGES or len(self.heads) != N_STAGES:
            raise ValidationError("depths and heads need one entry per stage (4)")
        for i in range(N_STAGES):
            if self.stage_width(i + 1) % self.heads[i]:
                raise ValidationError(
                    f"stage {i + 1} width {self.stage_width(i + 1)} not divisible by {self.heads[i]} heads")
        if self.sa_stage not in (1, 2, 3, 4):
            raise ValidationError("sa_stage must be in 1..4")
        if self.head_dim_K < 2:
            raise ValidationError("head_dim_K must be >= 2")
        if self.sa_width % self.n_sa_heads:
            raise ValidationError("SA width not divisible by SA heads")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValidationError("drop_path must lie in [0, 1)")

    def stage_width(self, k: int) -> int:
        return self.base_embed * 2 ** (k - 1)

    @property
    def sa_width(self) -> int:
        return self.stage_width(self.sa_stage)

    @property
    def n_sa_heads(self) -> int:
        return self.sa_heads or self.heads[self.sa_stage - 1]

    @property
    def input_grid(self) -> tuple:
        if self.img_size % self.patch:
            raise ShapeError(f"crop {self.img_size} not divisible by patch {self.patch}")
        return (self.img_size // self.patch,) * 3

    def stage_grid(self, k: int) -> tuple:
        return tuple(g // 2 ** (k - 1) for g in self.input_grid)

    @property
    def cell_voxels(self) -> int:
        """Voxels per axis covered by one stage-3 token."""
        return self.patch * 4


def check_geometry(grid: tuple, window: int) -> list:
    """Per-stage effective window sizes; raises ShapeError on indivisible grids."""
    grid = tuple(int(g) for g in grid)
    windows = []
    for k in range(N_STAGES):
        if k and any(g % 2 for g in grid):
            raise ShapeError(f"grid {grid} cannot be halved for stage {k + 1}")
        if k:
            grid = tuple(g // 2 for g in grid)
        ws = tuple(min(window, g) for g in grid)
        if any(g % w for g, w in zip(grid, ws)):
            raise ShapeError(f"stage {k + 1} grid {grid} not divisible by window {window}")
        windows.append(ws)
    return windows


# ---------------------------------------------------------------- building blocks

class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * (torch.rand(shape, dtype=x.dtype, device=x.device) < keep) / keep


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def window_partition(x, ws):
    B, D, H, W, C = x.shape
    x = x.view(B, D // ws[0], ws[0], H // ws[1], ws[1], W // ws[2], ws[2], C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws[0] * ws[1] * ws[2], C)


def window_reverse(windows, ws, B, D, H, W):
    x = windows.view(B, D // ws[0], H // ws[1], W // ws[2], ws[0], ws[1], ws[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, D, H, W, -1)


def _relative_index(ws) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in ws], indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[..., 0] += ws[0] - 1
    rel[..., 1] += ws[1] - 1
    rel[..., 2] += ws[2] - 1
    rel[..., 0] *= (2 * ws[1] - 1) * (2 * ws[2] - 1)
    rel[..., 1] *= 2 * ws[2] - 1
    return rel.sum(-1)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, ws):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        n_rel = (2 * ws[0] - 1) * (2 * ws[1] - 1) * (2 * ws[2] - 1)
        self.rel_bias = nn.Parameter(torch.zeros(n_rel, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self.register_buffer("rel_index", _relative_index(ws), persistent=False)

    def forward(self, x, mask=None):
        Bw, n, C = x.shape
        qkv = self.qkv(x).reshape(Bw, n, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.heads, n, n) + mask[None, :, None].to(attn.dtype)
            attn = attn.view(-1, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(Bw, n, C))


def _shift_mask(grid, ws, shift) -> torch.Tensor:
    img = torch.zeros((1, *grid, 1))
    cnt = 0
    slices = [(slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(None),)
              for w, s in zip(ws, shift)]
    for d in slices[0]:
        for h in slices[1]:
            for w in slices[2]:
                img[:, d, h, w, :] = cnt
                cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, grid, ws, shifted, drop_path, mlp_ratio):
        super().__init__()
        self.ws = ws
        # a window that spans the whole axis has nothing to shift into
        self.shift = tuple(w // 2 if shifted and g > w else 0 for g, w in zip(grid, ws))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if any(self.shift):
            self.register_buffer("attn_mask", _shift_mask(grid, ws, self.shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x):
        B, D, H, W, C = x.shape
        y = self.norm1(x)
        if any(self.shift):
            y = torch.roll(y, shifts=tuple(-s for s in self.shift), dims=(1, 2, 3))
        y = self.attn(window_partition(y, self.ws), self.attn_mask)
        y = window_reverse(y, self.ws, B, D, H, W)
        if any(self.shift):
            y = torch.roll(y, shifts=self.shift, dims=(1, 2, 3))
        x = x + self.drop_path(y)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


# ---------------------------------------------------------------- semantic attention

@dataclass
class SemanticAttentionOutput:
    cls_embedding: torch.Tensor   # (B, D)
    satt: torch.Tensor            # (B, N)
    per_head_rows: torch.Tensor   # (B, h, N + 1); column N is the [CLS] key


def semantic_attention(z, w_q, b_q, w_k, b_k, w_v, b_v, heads: int) -> SemanticAttentionOutput:
    """[CLS]-query multi-head attention over ``N`` patch tokens plus [CLS].

    ``z`` is ``(…, N + 1, D)`` with the [CLS] token in the last row. The
    query comes from [CLS] alone, keys and values from every row. ``satt``
    is the head-averaged softmax restricted to the ``N`` patch columns, not
    renormalized. ``cls_embedding`` is the concatenated per-head value
    mixture (before any output projection).
    """
    D = z.shape[-1]
    if D % heads:
        raise ShapeError(f"width {D} not divisible by {heads} heads")
    if w_q.shape[-1] != D or w_k.shape[-1] != D or w_v.shape[-1] != D:
        raise ShapeError("projection weights do not match token width")
    hd = D // heads
    lead = z.shape[:-2]
    n1 = z.shape[-2]
    q = F.linear(z[..., -1:, :], w_q, b_q).reshape(*lead, 1, heads, hd).transpose(-3, -2)
    k = F.linear(z, w_k, b_k).reshape(*lead, n1, heads, hd).transpose(-3, -2)
    v = F.linear(z, w_v, b_v).reshape(*lead, n1, heads, hd).transpose(-3, -2)
    rows = ((q @ k.transpose(-2, -1)) / math.sqrt(hd)).softmax(dim=-1)  # (…, h, 1, N+1)
    cls = (rows @ v).transpose(-3, -2).reshape(*lead, D)
    rows = rows.squeeze(-2)
    return SemanticAttentionOutput(cls, rows[..., :-1].mean(dim=-2), rows)


class ClassAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, z):
        out = semantic_attention(z, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                 self.v.weight, self.v.bias, self.heads)
        return self.proj(out.cls_embedding), out


class SemanticAttentionLayer(nn.Module):
    """Pre-norm class-attention layer with LayerScale; only [CLS] is updated."""

    def __init__(self, dim, heads, mlp_ratio, init_values):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ClassAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.gamma1 = nn.Parameter(init_values * torch.ones(dim))
        self.gamma2 = nn.Parameter(init_values * torch.ones(dim))

    def forward(self, patches, cls):
        z = self.norm1(torch.cat([patches, cls], dim=1))
        upd, out = self.attn(z)
        cls = cls + self.gamma1 * upd.unsqueeze(1)
        cls = cls + self.gamma2 * self.mlp(self.norm2(cls))
        return cls, out


# ---------------------------------------------------------------- full network

@dataclass
class EncoderOutputs:
    stage3_tokens: TokenGrid
    sa: SemanticAttentionOutput
    global_token: torch.Tensor
    reconstruction: Optional[torch.Tensor] = None
    stage_dims: list = field(default_factory=list)
    sa_grid: tuple = ()


class SmartNet(nn.Module):
    """Encoder plus the four projection heads used for co-distillation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        grid = cfg.input_grid
        windows = check_geometry(grid, cfg.window)
        C = cfg.base_embed
        n_in = int(grid[0] * grid[1] * grid[2])
        self.patch_embed = nn.Linear(cfg.patch ** 3, C)
        self.mask_token = nn.Parameter(torch.zeros(C))
        self.pos_embed = nn.Parameter(torch.zeros(n_in, C))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        rates = torch.linspace(0, cfg.drop_path, sum(cfg.depths)).tolist()
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for k in range(N_STAGES):
            dim = cfg.stage_width(k + 1)
            g = cfg.stage_grid(k + 1)
            first = sum(cfg.depths[:k])
            self.stages.append(nn.ModuleList([
                SwinBlock(dim, cfg.heads[k], g, windows[k], j % 2 == 1, rates[first + j], cfg.mlp_ratio)
                for j in range(cfg.depths[k])]))
            if k < N_STAGES - 1:
                self.merges.append(PatchMerging(dim))
        Dsa = cfg.sa_width
        self.cls_token = nn.Parameter(torch.zeros(1, 1, Dsa))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.sa_layers = nn.ModuleList([
            SemanticAttentionLayer(Dsa, cfg.n_sa_heads, cfg.mlp_ratio, cfg.layerscale_init)
            for _ in range(cfg.sa_depth)])
        self.sa_norm = nn.LayerNorm(Dsa)
        self.norm = nn.LayerNorm(cfg.stage_width(N_STAGES))
        K = cfg.head_dim_K
        self.patch_head = nn.Linear(cfg.stage_width(3), K)
        self.cls_head = nn.Linear(Dsa, K)
        self.global_head = nn.Linear(cfg.stage_width(N_STAGES), K)
        self.pred_head = nn.Linear(cfg.stage_width(3), cfg.cell_voxels ** 3)
        self.apply(_init_weights)
        for layer in self.sa_layers:
            # unit-scale [CLS] attention logits at init; 0.02 std leaves them flat
            nn.init.normal_(layer.attn.q.weight, std=Dsa ** -0.5)
            nn.init.normal_(layer.attn.k.weight, std=Dsa ** -0.5)

    # -- heads
    def project_patch_tokens(self, stage3_tokens):
        return self.patch_head(stage3_tokens)

    def project_cls(self, cls_embedding):
        return self.cls_head(cls_embedding)

    def project_global(self, global_token):
        return self.global_head(global_token)

    def predict_image(self, stage3_tokens):
        """Map each stage-3 token to its aligned voxel block and assemble the crop."""
        cells = self.cfg.stage_grid(3)
        n = cells[0] * cells[1] * cells[2]
        if stage3_tokens.shape[-2] != n or stage3_tokens.shape[-1] != self.cfg.stage_width(3):
            raise ShapeError(f"stage-3 tokens {tuple(stage3_tokens.shape)} do not match grid {cells}")
        return from_blocks(self.pred_head(stage3_tokens), cells, self.cfg.cell_voxels)

    # -- encoder
    def embed(self, voxels, visible=None):
        cfg = self.cfg
        if tuple(voxels.shape[-3:]) != (cfg.img_size,) * 3:
            raise ShapeError(f"crop {tuple(voxels.shape[-3:])} does not match img_size {cfg.img_size}")
        tokens = self.patch_embed(to_blocks(voxels, cfg.patch))
        if visible is not None:
            visible = torch.as_tensor(visible, device=tokens.device).bool()
            if visible.shape != tokens.shape[:2]:
                raise ShapeError(f"visibility {tuple(visible.shape)} vs tokens {tuple(tokens.shape[:2])}")
            tokens = torch.where(visible[..., None], tokens, self.mask_token.to(tokens.dtype))
        return tokens + self.pos_embed

    def forward(self, voxels, visible=None, reconstruct: bool = True) -> EncoderOutputs:
        cfg = self.cfg
        B = voxels.shape[0]
        x = self.embed(voxels, visible).view(B, *cfg.input_grid, cfg.base_embed)
        stage3 = sa = None
        dims = []
        for k in range(N_STAGES):
            for blk in self.stages[k]:
                x = blk(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after stage {k + 1}")
            dims.append(tuple(x.shape[1:4]))
            flat = x.reshape(B, -1, x.shape[-1])
            if k + 1 == 3:
                stage3 = flat
            if k + 1 == cfg.sa_stage:
                sa = self._semantic_attention(flat)
            if k < N_STAGES - 1:
                x = self.merges[k](x)
        global_token = self.norm(x.reshape(B, -1, x.shape[-1])).mean(dim=1)
        recon = self.predict_image(stage3) if reconstruct else None
        tg = TokenGrid(stage3, cfg.stage_grid(3), cfg.patch * 4, "stage3")
        return EncoderOutputs(tg, sa, global_token, recon, dims, cfg.stage_grid(cfg.sa_stage))

    def _semantic_attention(self, patches) -> SemanticAttentionOutput:
        cls = self.cls_token.expand(patches.shape[0], -1, -1).to(patches.dtype)
        out = None
        for layer in self.sa_layers:
            cls, out = layer(patches, cls)
        cls = self.sa_norm(cls.squeeze(1))
        if not torch.isfinite(cls).all():
            raise NumericError("non-finite activations in the semantic attention block")
        return SemanticAttentionOutput(cls, out.satt, out.per_head_rows)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def forward_encoder(net: SmartNet, voxels, visible=None, role: str = "student") -> EncoderOutputs:
    """Run ``net`` as student (stochastic depth, autograd) or teacher (deterministic, no grad)."""
    if role == "student":
        return net(voxels, visible)
    if role != "teacher":
        raise ValidationError(f"unknown role {role!r}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(voxels, visible, reconstruct=False)
    finally:
        net.train(was_training)
