"""Downstream evaluation: features, clustering, probing, fine-tuning, attention maps."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from scipy.stats import rankdata

from .errors import NumericError, ShapeError, ValidationError
from .model import SmartNet, forward_encoder
from .phantoms import VolumeSample, normalize_crop

log = logging.getLogger(__name__)

INTRA_DEF = "intra: per-class mean Euclidean distance to the class centroid, mean/sd over classes"
INTER_DEF = "inter: pairwise Euclidean distance between class centroids, mean/sd over pairs"


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    source: str = "cls"
    failed: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise ShapeError(f"rows {self.rows.shape} vs labels {self.labels.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError("feature matrix has non-finite entries")


@dataclass
class ClusterReport:
    intra_mean: float
    intra_sd: float
    inter_mean: float
    inter_sd: float
    centroids: dict
    definition: str = f"{INTRA_DEF}; {INTER_DEF}"

    @property
    def separation(self) -> float:
        return self.inter_mean / self.intra_mean if self.intra_mean > 0 else math.inf


@dataclass
class ClassificationReport:
    auc: float
    ap50: float
    ar50: float
    folds: list = field(default_factory=list)
    metric_mode: str = "threshold"


@dataclass
class LocalizationReport:
    dsc: list
    mean: float
    sd: float
    percentile: float


@dataclass
class AttentionMap:
    values: np.ndarray
    degenerate: bool = False


# ---------------------------------------------------------------- features

def _as_input(net: SmartNet, voxels: np.ndarray) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(voxels)).to(dtype)


def _crop_for(net: SmartNet, vol: VolumeSample) -> np.ndarray:
    size = net.cfg.img_size
    shape = vol.voxels.shape
    if any(s < size for s in shape):
        raise ShapeError(f"volume {shape} smaller than crop {size}")
    off = [(s - size) // 2 for s in shape]
    return normalize_crop(vol.voxels[off[0]:off[0] + size, off[1]:off[1] + size, off[2]:off[2] + size])


def extract_features(net: SmartNet, volumes: Sequence[VolumeSample], source: str = "cls",
                     batch_size: int = 8) -> FeatureMatrix:
    """One row per volume from the central crop; deterministic (teacher-role forward)."""
    if source not in ("cls", "global_pool"):
        raise ValidationError(f"unknown feature source {source!r}")
    width = net.cfg.sa_width if source == "cls" else net.cfg.stage_width(4)
    crops, labels, failed = [], [], []
    for i, vol in enumerate(volumes):
        try:
            crops.append(_crop_for(net, vol))
            labels.append(-1 if vol.label is None else vol.label)
        except ShapeError as exc:
            log.warning("skipping sample %d: %s", i, exc)
            failed.append(i)
    rows = []
    for start in range(0, len(crops), batch_size):
        x = _as_input(net, np.stack(crops[start:start + batch_size]))
        out = forward_encoder(net, x, None, "teacher")
        feats = out.sa.cls_embedding if source == "cls" else out.global_token
        rows.append(feats.double().numpy())
    rows = np.concatenate(rows) if rows else np.zeros((0, width))
    return FeatureMatrix(rows, np.asarray(labels, dtype=np.int64), source, failed)


# ---------------------------------------------------------------- clustering

def cluster_metrics(fm: FeatureMatrix) -> ClusterReport:
    classes = np.unique(fm.labels)
    if len(classes) < 2:
        raise ValidationError("inter-cluster distance needs at least two classes")
    centroids = {int(c): fm.rows[fm.labels == c].mean(axis=0) for c in classes}
    intra = np.array([np.linalg.norm(fm.rows[fm.labels == c] - centroids[int(c)], axis=1).mean()
                      for c in classes])
    cents = np.stack([centroids[int(c)] for c in classes])
    i, j = np.triu_indices(len(classes), k=1)
    inter = np.linalg.norm(cents[i] - cents[j], axis=1)
    return ClusterReport(float(intra.mean()), float(intra.std()), float(inter.mean()),
                         float(inter.std()), {c: v.tolist() for c, v in centroids.items()})


# ---------------------------------------------------------------- classification metrics

def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_at_half(scores, labels, mode: str = "threshold") -> tuple[float, float, bool]:
    """Positive-class (precision, recall) x100 and a flag set when precision was undefined.

    ``threshold`` mode thresholds scores at 0.5. ``average`` mode returns
    average precision over the ranked list and recall averaged over the
    thresholds 0.50, 0.55, ..., 0.95.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ValidationError("scores must lie in [0, 1]")
    n_pos = int(labels.sum())
    if mode == "threshold":
        pred = scores >= 0.5
        tp = int((pred & labels).sum())
        undefined = not pred.any()
        precision = 0.0 if undefined else tp / int(pred.sum())
        recall = tp / n_pos if n_pos else 0.0
        return 100.0 * precision, 100.0 * recall, undefined
    if mode == "average":
        order = np.argsort(-scores, kind="stable")
        hits = labels[order]
        if n_pos == 0:
            return 0.0, 0.0, True
        prec_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
        ap = float(prec_at_k[hits].sum() / n_pos)
        recalls = [((scores >= t) & labels).sum() / n_pos for t in np.arange(0.5, 0.951, 0.05)]
        return 100.0 * ap, 100.0 * float(np.mean(recalls)), False
    raise ValidationError(f"unknown metric mode {mode!r}")


def _binary_metrics(prob_pos, y, mode) -> dict:
    ap, ar, undefined = precision_recall_at_half(prob_pos, y, mode)
    return {"auc": auc(prob_pos, y), "ap50": ap, "ar50": ar, "precision_undefined": undefined}


def _summarize(folds: list, mode: str) -> ClassificationReport:
    if not folds:
        raise ValidationError("every fold was degenerate; no metrics")
    mean = {k: float(np.mean([f[k] for f in folds])) for k in ("auc", "ap50", "ar50")}
    return ClassificationReport(mean["auc"], mean["ap50"], mean["ar50"], folds, mode)


def stratified_folds(labels, n_folds: int, seed: int) -> list:
    """Per-fold test indices; classes are spread round-robin after a seeded shuffle."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    k = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        for i in idx:
            folds[k % n_folds].append(int(i))
            k += 1
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def stratified_subset(labels, fraction: float, seed: int) -> np.ndarray:
    """Exactly ceil(fraction * n) indices, allocated to classes by largest remainder."""
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must lie in (0, 1]")
    n = labels.size
    total = min(n, math.ceil(round(fraction * n, 9)))
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * total / n
    take = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - take), kind="stable")[:total - take.sum()]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(np.flatnonzero(labels == c), size=t, replace=False)
              for c, t in zip(classes, take)]
    return np.sort(np.concatenate(chosen)).astype(np.int64)


def linear_probe(fm: FeatureMatrix, folds: int = 3, seed: int = 0,
                 mode: str = "threshold") -> ClassificationReport:
    """Logistic regression on frozen, standardized features with stratified folds (binary labels)."""
    from sklearn.linear_model import LogisticRegression

    classes = np.unique(fm.labels)
    if len(classes) != 2:
        raise ValidationError(f"linear probe expects two classes, got {len(classes)}")
    y = (fm.labels == classes[1]).astype(int)
    results = []
    for k, test in enumerate(stratified_folds(y, folds, seed)):
        train = np.setdiff1d(np.arange(len(y)), test)
        if len(np.unique(y[train])) < 2 or len(np.unique(y[test])) < 2:
            log.warning("fold %d has a single class; skipped", k)
            continue
        mu, sd = fm.rows[train].mean(0), fm.rows[train].std(0) + 1e-8
        clf = LogisticRegression(max_iter=2000)
        clf.fit((fm.rows[train] - mu) / sd, y[train])
        prob = clf.predict_proba((fm.rows[test] - mu) / sd)[:, 1]
        results.append({"fold": k, **_binary_metrics(prob, y[test], mode)})
    return _summarize(results, mode)


# ---------------------------------------------------------------- fine-tuning

@dataclass
class FinetuneConfig:
    steps: int = 60
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.05
    data_fraction: float = 1.0
    test_fraction: float = 1 / 3
    seed: int = 0
    metric_mode: str = "threshold"


class Classifier(nn.Module):
    def __init__(self, encoder: SmartNet, n_classes: int = 2):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.cfg.sa_width, n_classes)

    def forward(self, x):
        return self.head(self.encoder(x, None, reconstruct=False).sa.cls_embedding)


def finetune(encoder: SmartNet, volumes: Sequence[VolumeSample], cfg: FinetuneConfig = FinetuneConfig()
             ) -> ClassificationReport:
    """Supervised training of encoder + [CLS] head on a stratified split; metrics on the held-out part."""
    labels = np.array([v.label for v in volumes])
    classes = np.unique(labels)
    if len(classes) != 2:
        raise ValidationError(f"fine-tuning expects two classes, got {len(classes)}")
    y = (labels == classes[1]).astype(np.int64)
    test = stratified_subset(y, cfg.test_fraction, cfg.seed)
    train = np.setdiff1d(np.arange(len(y)), test)
    if cfg.data_fraction < 1.0:
        train = train[stratified_subset(y[train], cfg.data_fraction, cfg.seed + 1)]
    torch.manual_seed(cfg.seed)
    model = Classifier(copy.deepcopy(encoder))
    dtype = next(encoder.parameters()).dtype
    model.to(dtype).train()
    for p in model.parameters():
        p.requires_grad_(True)
    crops = np.stack([_crop_for(encoder, v) for v in volumes])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    for step in range(cfg.steps):
        idx = rng.choice(train, size=min(cfg.batch_size, len(train)), replace=False)
        logits = model(_as_input(encoder, crops[idx]))
        loss = nn.functional.cross_entropy(logits, torch.as_tensor(y[idx]))
        if not torch.isfinite(loss):
            raise NumericError(f"fine-tuning diverged at step {step} (loss {float(loss)})")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        prob = torch.softmax(model(_as_input(encoder, crops[test])), dim=-1)[:, 1].double().numpy()
    fold = {"fold": 0, "n_train": int(len(train)), "n_test": int(len(test)),
            **_binary_metrics(prob, y[test], cfg.metric_mode)}
    return _summarize([fold], cfg.metric_mode)


# ---------------------------------------------------------------- attention maps

def upsample_cells(cells: np.ndarray, factor: int, coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Trilinear interpolation of a cell grid onto voxels ``factor`` times finer.

    Cell ``i`` is centred on voxel coordinate ``factor * i + (factor - 1) / 2``;
    outside the outermost centres values are held constant. ``coords`` (3, …)
    evaluates the same interpolant at arbitrary voxel coordinates.
    """
    cells = np.asarray(cells, dtype=np.float64)
    if coords is None:
        axes = [np.arange(n * factor) for n in cells.shape]
        coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    src = (np.asarray(coords, dtype=np.float64) - (factor - 1) / 2.0) / factor
    return ndimage.map_coordinates(cells, src, order=1, mode="nearest")


def rescale_unit(x: np.ndarray) -> AttentionMap:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return AttentionMap(np.zeros_like(x), True)
    return AttentionMap((x - lo) / (hi - lo), False)


def _tile_starts(n: int, size: int) -> list:
    stride = max(1, size // 2)
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def satt_cells(net: SmartNet, crops: np.ndarray) -> np.ndarray:
    """Semantic attention per crop, reshaped onto the SA grid: (B, d, h, w)."""
    out = forward_encoder(net, _as_input(net, crops), None, "teacher")
    return out.sa.satt.double().numpy().reshape(len(crops), *net.cfg.stage_grid(net.cfg.sa_stage))


def attention_volume(net: SmartNet, volume, tile: bool = True) -> AttentionMap:
    """Per-voxel semantic attention rescaled to [0, 1].

    Volumes larger than the crop are tiled with 50% overlap and the
    attention is averaged where tiles overlap.
    """
    voxels = volume.voxels if isinstance(volume, VolumeSample) else np.asarray(volume, np.float32)
    size = net.cfg.img_size
    factor = size // net.cfg.stage_grid(net.cfg.sa_stage)[0]
    shape = voxels.shape
    if any(s < size for s in shape) or (shape != (size,) * 3 and not tile):
        raise ShapeError(f"volume {shape} does not conform to crop {size}")
    acc = np.zeros(shape)
    hits = np.zeros(shape)
    for z in _tile_starts(shape[0], size):
        for y in _tile_starts(shape[1], size):
            for x in _tile_starts(shape[2], size):
                crop = normalize_crop(voxels[z:z + size, y:y + size, x:x + size])
                cells = satt_cells(net, crop[None])[0]
                acc[z:z + size, y:y + size, x:x + size] += upsample_cells(cells, factor)
                hits[z:z + size, y:y + size, x:x + size] += 1
    return rescale_unit(acc / hits)


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


def threshold_mask(att: np.ndarray, percentile: float = 90.0) -> np.ndarray:
    return att > np.percentile(att, percentile)


def localize_from_attention(att: np.ndarray, roi, percentile: float = 90.0) -> float:
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise ValidationError("region of interest is empty")
    if roi.shape != att.shape:
        raise ShapeError(f"roi {roi.shape} vs attention {att.shape}")
    return dice(threshold_mask(att, percentile), roi)


def zero_shot_localize(net: SmartNet, volume: VolumeSample, roi=None, percentile: float = 90.0) -> float:
    """DSC between the above-percentile attention voxels and the region of interest."""
    roi = volume.roi if roi is None else roi
    if roi is None:
        raise ValidationError("zero-shot localization needs a region of interest")
    if not np.asarray(roi).any():
        raise ValidationError("region of interest is empty")
    return localize_from_attention(attention_volume(net, volume).values, roi, percentile)


def localization_report(dscs: Sequence[float], percentile: float) -> LocalizationReport:
    d = np.asarray(dscs, dtype=np.float64)
    return LocalizationReport(d.tolist(), float(d.mean()), float(d.std()), percentile)


def random_attention_dsc(volume: VolumeSample, cells_shape, factor: int, rng,
                         percentile: float = 90.0) -> float:
    """Same thresholding applied to a uniformly random cell field."""
    att = rescale_unit(upsample_cells(rng.random(cells_shape), factor)).values
    return localize_from_attention(att, volume.roi, percentile)


def satt_mass_ratio(satt_cells_: np.ndarray, roi: np.ndarray) -> tuple[float, float]:
    """(attention mass on roi-covering cells / total mass, fraction of cells covering the roi)."""
    cells = np.asarray(satt_cells_, dtype=np.float64)
    f = tuple(s // c for s, c in zip(roi.shape, cells.shape))
    cov = np.asarray(roi, bool).reshape(cells.shape[0], f[0], cells.shape[1], f[1],
                                        cells.shape[2], f[2]).any(axis=(1, 3, 5))
    return float(cells[cov].sum() / cells.sum()), float(cov.mean())


# ---------------------------------------------------------------- plots and reports

def project_2d(rows: np.ndarray) -> np.ndarray:
    """Principal-component projection with a fixed sign convention."""
    x = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    out = x @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def embedding_plot(fm: FeatureMatrix, path) -> tuple[Path, Path]:
    """Write a labelled 2D scatter PNG and a TSV of the projected coordinates."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(fm.rows) < 3:
        raise ValidationError("embedding plot needs at least 3 samples")
    path = Path(path)
    xy = project_2d(fm.rows)
    fig, ax = plt.subplots(figsize=(5, 5))
    for c in np.unique(fm.labels):
        sel = fm.labels == c
        ax.scatter(xy[sel, 0], xy[sel, 1], s=12, label=f"class {c}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    png = path.with_suffix(".png")
    tsv = path.with_suffix(".tsv")
    fig.savefig(png, dpi=100)
    plt.close(fig)
    with open(tsv, "w") as f:
        f.write("index\tlabel\tx\ty\n")
        for i, (lab, (a, b)) in enumerate(zip(fm.labels, xy)):
            f.write(f"{i}\t{lab}\t{a:.10g}\t{b:.10g}\n")
    return png, tsv


def write_report(report, path, header: Optional[dict] = None) -> tuple[Path, Path]:
    """Write ``report`` as JSON plus an aligned text table next to it."""
    path = Path(path)
    body = dict(report) if isinstance(report, dict) else asdict(report)
    payload = {"header": header or {}, "report": body}
    js = path.with_suffix(".json")
    js.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    lines = [f"# {k}: {v}" for k, v in sorted((header or {}).items())]
    for k, v in body.items():
        if isinstance(v, (list, dict)) and len(str(v)) > 80:
            v = f"<{type(v).__name__} of {len(v)}>"
        lines.append(f"{k:<14}{v}")
    txt = path.with_suffix(".txt")
    txt.write_text("\n".join(lines) + "\n")
    return js, txt
