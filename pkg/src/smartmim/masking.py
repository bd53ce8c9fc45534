"""Patch tokenization and token masking strategies.

All selection routines work on flat raster-ordered token indices
(depth-major, then height, then width) and are pure given an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from einops import rearrange

from .errors import ShapeError, ValidationError

GridDims = tuple[int, int, int]


class MaskStrategy(enum.IntEnum):
    RANDOM = 0
    BLOCKWISE = 1
    ATTENTION = 2
    PATCH_DROPOUT = 3


@dataclass
class TokenGrid:
    """Patch tokens plus the 3D geometry they were cut from.

    ``tokens`` may be a numpy array or a torch tensor; leading batch
    dimensions are allowed as long as the last two are ``(N, D)``.
    ``blocks`` keeps the raw voxel blocks when the tokens were embedded.
    """

    tokens: Any
    grid_dims: GridDims
    patch_size: int
    level: str = "input"
    blocks: Any = None

    def __post_init__(self):
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        if self.level not in ("input", "stage3"):
            raise ValidationError(f"unknown token level {self.level!r}")
        n = int(np.prod(self.grid_dims))
        if self.tokens.shape[-2] != n:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens for grid {self.grid_dims}")
        if self.tokens.shape[-1] <= 0:
            raise ShapeError("embedding width must be positive")

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def embed_dim(self) -> int:
        return int(self.tokens.shape[-1])


@dataclass
class MaskVector:
    """Binary visibility over a token grid (1 = visible)."""

    visible: np.ndarray
    masked_idx: np.ndarray
    hint_idx: np.ndarray
    strategy: MaskStrategy
    ratio: float = 0.0
    hint_ratio: float = 0.0
    grid_dims: Optional[GridDims] = None
    blocks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)
        self.masked_idx = np.sort(np.asarray(self.masked_idx, dtype=np.int64))
        self.hint_idx = np.sort(np.asarray(self.hint_idx, dtype=np.int64))
        self.strategy = MaskStrategy(self.strategy)
        if np.intersect1d(self.masked_idx, self.hint_idx).size:
            raise ValidationError("hint tokens cannot also be masked")
        if not np.array_equal(np.flatnonzero(~self.visible), self.masked_idx):
            raise ValidationError("visible vector disagrees with masked_idx")

    @property
    def n(self) -> int:
        return int(self.visible.size)

    @classmethod
    def from_masked(cls, n: int, masked, strategy, hints=(), **kw) -> "MaskVector":
        visible = np.ones(n, dtype=bool)
        masked = np.asarray(masked, dtype=np.int64)
        visible[masked] = False
        return cls(visible, masked, np.asarray(hints, dtype=np.int64), strategy, **kw)


@dataclass
class MaskingConfig:
    r: float = 0.7
    s: float = 0.1
    r_t: float = 0.7
    block_edge: int = 2
    strategy: str = "attention"
    invert: bool = False

    def __post_init__(self):
        validate_masking(self)


def validate_masking(cfg: MaskingConfig):
    if not 0.0 <= cfg.r <= 1.0:
        raise ValidationError(f"masking ratio r={cfg.r} outside [0, 1]")
    if not (0.0 <= cfg.s and (cfg.s < cfg.r or cfg.s == cfg.r == 0.0)):
        raise ValidationError(f"hint ratio s={cfg.s} must satisfy 0 <= s < r={cfg.r}")
    if not 0.0 <= cfg.r_t <= 1.0:
        raise ValidationError(f"patch drop ratio r_t={cfg.r_t} outside [0, 1]")
    if cfg.block_edge < 1:
        raise ValidationError("block_edge must be >= 1")
    if cfg.strategy not in ("attention", "random", "blockwise"):
        raise ValidationError(f"unknown masking strategy {cfg.strategy!r}")


def ceil_count(ratio: float, n: int) -> int:
    """``ceil(ratio * n)`` robust to float noise such as 0.7 * 30 = 21.000000000000004."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio {ratio} outside [0, 1]")
    return min(n, math.ceil(round(ratio * n, 9)))


# ---------------------------------------------------------------- tokenization

def grid_dims_for(shape: Sequence[int], patch_size: int) -> GridDims:
    shape = tuple(int(s) for s in shape[-3:])
    if patch_size < 1 or any(s % patch_size for s in shape):
        raise ShapeError(f"crop {shape} not divisible by patch size {patch_size}")
    return tuple(s // patch_size for s in shape)


def to_blocks(view, patch_size: int):
    """(…, D, H, W) voxels -> (…, N, p**3) raster-ordered voxel blocks."""
    grid_dims_for(view.shape, patch_size)
    p = patch_size
    return rearrange(view, "... (d p1) (h p2) (w p3) -> ... (d h w) (p1 p2 p3)", p1=p, p2=p, p3=p)


def from_blocks(blocks, grid_dims: GridDims, patch_size: int):
    """Inverse of :func:`to_blocks`."""
    d, h, w = grid_dims
    p = patch_size
    return rearrange(blocks, "... (d h w) (p1 p2 p3) -> ... (d p1) (h p2) (w p3)",
                     d=d, h=h, w=w, p1=p, p2=p, p3=p)


def patchify(view, patch_size: int, embed=None) -> TokenGrid:
    """Cut a crop into patch tokens.

    With ``embed`` (any callable mapping ``(…, N, p**3)`` to ``(…, N, D)``,
    e.g. the encoder's patch embedding) the tokens are embedded and the raw
    blocks are kept on the result for reconstruction targets.
    """
    dims = grid_dims_for(view.shape, patch_size)
    blocks = to_blocks(view, patch_size)
    tokens = blocks if embed is None else embed(blocks)
    return TokenGrid(tokens, dims, patch_size, "input", blocks=blocks)


def unpatchify(tg: TokenGrid):
    blocks = tg.tokens if tg.blocks is None else tg.blocks
    return from_blocks(blocks, tg.grid_dims, tg.patch_size)


# ---------------------------------------------------------------- strategies

def random_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskVector:
    k = ceil_count(ratio, n)
    masked = rng.choice(n, size=k, replace=False) if k else np.empty(0, np.int64)
    return MaskVector.from_masked(n, masked, MaskStrategy.RANDOM, ratio=ratio)


def blockwise_mask(grid_dims: GridDims, ratio: float, block_edge: int,
                   rng: np.random.Generator) -> MaskVector:
    """Greedily mask random axis-aligned cubes until the masked fraction reaches ``ratio``.

    Blocks may overlap; the block that first crosses the target is kept, so
    the result can overshoot.
    """
    grid_dims = tuple(int(g) for g in grid_dims)
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio {ratio} outside [0, 1]")
    if any(block_edge > g for g in grid_dims) or block_edge < 1:
        raise ShapeError(f"block edge {block_edge} does not fit grid {grid_dims}")
    grid = np.zeros(grid_dims, dtype=bool)
    n = grid.size
    target = ceil_count(ratio, n)
    blocks = []
    while grid.sum() < target:
        o = tuple(int(rng.integers(0, g - block_edge + 1)) for g in grid_dims)
        grid[o[0]:o[0] + block_edge, o[1]:o[1] + block_edge, o[2]:o[2] + block_edge] = True
        blocks.append(o)
    return MaskVector.from_masked(n, np.flatnonzero(grid.ravel()), MaskStrategy.BLOCKWISE,
                                  ratio=ratio, grid_dims=grid_dims, blocks=tuple(blocks))


def attention_ranking(satt: np.ndarray, invert: bool = False) -> np.ndarray:
    """Indices by descending attention, ties broken by ascending index."""
    idx = np.arange(satt.size)
    key = satt if invert else -satt
    return np.lexsort((idx, key))


def attention_guided_mask(satt, cfg: MaskingConfig, exclude=None) -> MaskVector:
    """Mask the top ``ceil(r N)`` attended tokens, leaving the top ``ceil(s N)`` visible as hints.

    Indices in ``exclude`` (e.g. positions the teacher never saw) are ranked
    last and are neither masked nor used as hints.
    """
    satt = np.asarray(satt, dtype=np.float64).ravel()
    if satt.size < 1:
        raise ValidationError("attention vector is empty")
    if not np.all(np.isfinite(satt)):
        raise ValidationError("attention vector has non-finite entries")
    if satt.min() < 0.0 or satt.max() > 1.0:
        raise ValidationError("attention entries must lie in [0, 1]")
    n = satt.size
    ranking = attention_ranking(satt, cfg.invert)
    if exclude is not None and len(exclude):
        drop = np.zeros(n, dtype=bool)
        drop[np.asarray(exclude, dtype=np.int64)] = True
        ranking = ranking[~drop[ranking]]
    candidates = ranking[:ceil_count(cfg.r, n)]
    hints = ranking[:ceil_count(cfg.s, n)]
    masked = np.setdiff1d(candidates, hints)
    return MaskVector.from_masked(n, masked, MaskStrategy.ATTENTION, hints=hints,
                                  ratio=cfg.r, hint_ratio=cfg.s)


def apply_mask(tg: TokenGrid, m: MaskVector, mask_embedding) -> TokenGrid:
    """Replace masked rows by ``mask_embedding``; visible rows are left untouched."""
    if m.n != tg.n_tokens:
        raise ShapeError(f"mask over {m.n} tokens, grid has {tg.n_tokens}")
    tokens = tg.tokens
    if isinstance(tokens, np.ndarray):
        keep = m.visible[:, None]
        out = np.where(keep, tokens, np.asarray(mask_embedding, dtype=tokens.dtype))
    else:
        import torch
        keep = torch.as_tensor(m.visible, device=tokens.device)[:, None]
        out = torch.where(keep, tokens, mask_embedding.to(tokens.dtype))
    return TokenGrid(out, tg.grid_dims, tg.patch_size, tg.level, blocks=tg.blocks)


def patch_dropout(tg: TokenGrid, r_t: float, rng: np.random.Generator,
                  mask_embedding) -> tuple[TokenGrid, MaskVector]:
    m = random_mask(tg.n_tokens, r_t, rng)
    m.strategy = MaskStrategy.PATCH_DROPOUT
    return apply_mask(tg, m, mask_embedding), m


def _scale_factors(coarse: GridDims, fine: GridDims) -> GridDims:
    if len(coarse) != 3 or len(fine) != 3:
        raise ShapeError("grid dims must be 3D")
    if any(f % c for c, f in zip(coarse, fine)):
        raise ShapeError(f"grid {fine} is not an integer multiple of {coarse}")
    return tuple(f // c for c, f in zip(coarse, fine))


def _upsample_flags(flags: np.ndarray, coarse: GridDims, scale: GridDims) -> np.ndarray:
    g = flags.reshape(coarse)
    for axis, k in enumerate(scale):
        g = np.repeat(g, k, axis=axis)
    return g.ravel()


def broadcast_mask(coarse_mask: MaskVector, coarse_dims: GridDims, fine_dims: GridDims) -> MaskVector:
    """Expand a mask on a coarse grid so every coarse cell covers its aligned fine block."""
    coarse_dims = tuple(int(g) for g in coarse_dims)
    fine_dims = tuple(int(g) for g in fine_dims)
    scale = _scale_factors(coarse_dims, fine_dims)
    if coarse_mask.n != int(np.prod(coarse_dims)):
        raise ShapeError("mask length does not match coarse grid")
    masked = np.zeros(coarse_mask.n, dtype=bool)
    masked[coarse_mask.masked_idx] = True
    hints = np.zeros(coarse_mask.n, dtype=bool)
    hints[coarse_mask.hint_idx] = True
    fine_masked = _upsample_flags(masked, coarse_dims, scale)
    fine_hints = _upsample_flags(hints, coarse_dims, scale)
    return MaskVector.from_masked(fine_masked.size, np.flatnonzero(fine_masked), coarse_mask.strategy,
                                  hints=np.flatnonzero(fine_hints), ratio=coarse_mask.ratio,
                                  hint_ratio=coarse_mask.hint_ratio, grid_dims=fine_dims)


def pool_mask(fine_mask: MaskVector, fine_dims: GridDims, coarse_dims: GridDims) -> MaskVector:
    """A coarse cell is masked only when every fine token it covers is masked."""
    scale = _scale_factors(coarse_dims, fine_dims)
    g = (~fine_mask.visible).reshape(fine_dims)
    c = tuple(int(x) for x in coarse_dims)
    g = g.reshape(c[0], scale[0], c[1], scale[1], c[2], scale[2]).all(axis=(1, 3, 5))
    return MaskVector.from_masked(g.size, np.flatnonzero(g.ravel()), fine_mask.strategy,
                                  ratio=fine_mask.ratio, hint_ratio=fine_mask.hint_ratio,
                                  grid_dims=c)


def stack_visible(masks: Sequence[MaskVector]) -> np.ndarray:
    return np.stack([m.visible for m in masks])


# ---------------------------------------------------------------- wire format

_HEADER = struct.Struct("<IIII")


def pack_mask(m: MaskVector) -> bytes:
    """16-byte header (N, strategy, r and s as 1e-4 fixed point) + visible bits + hint bits."""
    hints = np.zeros(m.n, dtype=bool)
    hints[m.hint_idx] = True
    header = _HEADER.pack(m.n, int(m.strategy), round(m.ratio * 1e4), round(m.hint_ratio * 1e4))
    return (header + np.packbits(m.visible, bitorder="little").tobytes()
            + np.packbits(hints, bitorder="little").tobytes())


def unpack_mask(buf: bytes) -> MaskVector:
    if len(buf) < _HEADER.size:
        raise ShapeError("mask buffer shorter than its header")
    n, code, r, s = _HEADER.unpack_from(buf)
    nbytes = (n + 7) // 8
    if len(buf) != _HEADER.size + 2 * nbytes:
        raise ShapeError(f"mask buffer has {len(buf)} bytes, expected {_HEADER.size + 2 * nbytes}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size)
    visible = np.unpackbits(body[:nbytes], count=n, bitorder="little").astype(bool)
    hints = np.unpackbits(body[nbytes:], count=n, bitorder="little").astype(bool)
    return MaskVector.from_masked(n, np.flatnonzero(~visible), MaskStrategy(code),
                                  hints=np.flatnonzero(hints), ratio=r / 1e4, hint_ratio=s / 1e4)
