"""Segmentation evaluation: region Dice, sliding-window inference, and the
15-combination stability harness.

Scores are kept as fractions in [0, 1] throughout; rendering to percent is a
reporting concern.  Aggregation over the 15 modality combinations uses the
population std/variance (ddof=0).
"""
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, ParameterError, ShapeError
from .phantoms import MODALITIES, ModalityBundle, apply_mask, enumerate_combinations, normalize_bundle
from .tape import Tensor

# evaluation regions as sets of label values
REGIONS = (("WT", (1, 2, 3)), ("TC", (2, 3)), ("ET", (3,)))
REGION_NAMES = tuple(name for name, _ in REGIONS)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary Dice overlap; two empty masks count as a perfect match."""
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: shapes {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def region_mask(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    return np.isin(labels, list(classes))


def merge_regions(labels: np.ndarray) -> dict:
    """Class labels -> nested binary region masks {WT, TC, ET}."""
    a = np.asarray(labels)
    if not np.issubdtype(a.dtype, np.integer):
        raise DataError(f"labels must be integer, got {a.dtype}")
    if a.size and (a.min() < 0 or a.max() > 3):
        raise DataError("labels out of range [0, 3]")
    return {name: region_mask(a, cls) for name, cls in REGIONS}


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """(B, K, D, H, W) logits -> (B, D, H, W) argmax labels."""
    if logits.ndim != 5:
        raise ShapeError(f"expected rank-5 logits, got {logits.shape}")
    return np.argmax(logits, axis=1).astype(np.uint8)


def _window_starts(size: int, window: int, stride: int) -> list:
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def stitch_windows(forward: Callable[[np.ndarray], np.ndarray],
                   volume: np.ndarray, window: int,
                   overlap: float = 0.5) -> np.ndarray:
    """Tile a (B, C, D, H, W) volume with cubic windows, run `forward` on each
    tile, and average the logits uniformly where tiles overlap.

    The last window along each axis is clamped to end at the volume edge.  A
    window covering the whole volume degenerates to one direct forward pass.
    """
    if volume.ndim != 5:
        raise ShapeError(f"expected rank-5 input, got {volume.shape}")
    b, c, d, h, w = volume.shape
    if not 0.0 <= overlap < 1.0:
        raise ParameterError(f"overlap must be in [0, 1), got {overlap}")
    if window < 1 or window > min(d, h, w):
        raise ParameterError(f"window {window} does not fit volume {(d, h, w)}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    zs = _window_starts(d, window, stride)
    ys = _window_starts(h, window, stride)
    xs = _window_starts(w, window, stride)
    acc = None
    cnt = np.zeros((1, 1, d, h, w), dtype=np.float64)
    for z in zs:
        for y in ys:
            for x in xs:
                tile = volume[:, :, z:z + window, y:y + window, x:x + window]
                out = forward(np.ascontiguousarray(tile))
                if acc is None:
                    acc = np.zeros((b, out.shape[1], d, h, w), dtype=np.float64)
                acc[:, :, z:z + window, y:y + window, x:x + window] += out
                cnt[:, :, z:z + window, y:y + window, x:x + window] += 1.0
    return (acc / cnt).astype(volume.dtype)


def net_forward(net, x: np.ndarray, mask: Sequence[bool]):
    """One inference pass; returns (logits, quality) as numpy arrays."""
    was_training = net.training
    net.eval()
    try:
        out = net.forward(Tensor(x.astype(net.dtype)), mask=mask)
    finally:
        if was_training:
            net.train(True)
    quality = None
    if out.quality is not None:
        quality = np.stack([q.data for q in out.quality], axis=1)  # (B, 4)
    return out.main_logits.data, quality


def sliding_window_infer(net, bundle: ModalityBundle, window: int,
                         overlap: float = 0.5):
    """Sliding-window logits for a normalized bundle, plus tile-averaged
    quality scores.  A window larger than the volume falls back to a single
    direct forward pass rather than failing."""
    x = bundle.stacked()
    mask = tuple(bool(v) for v in bundle.mask)
    if window >= min(x.shape[2:]):
        return net_forward(net, x, mask)
    tile_quality = []

    def fw(tile):
        logits_t, q = net_forward(net, tile, mask)
        if q is not None:
            tile_quality.append(q)
        return logits_t

    logits = stitch_windows(fw, x, window, overlap)
    quality = np.mean(tile_quality, axis=0) if tile_quality else None
    return logits, quality


def infer_case(net, bundle: ModalityBundle, window: Optional[int] = None):
    """Normalize, forward (sliding-window if `window` is set), and return
    (pred_labels, quality) for one bundle."""
    normed = normalize_bundle(bundle)
    if window is None:
        x = normed.stacked()
        logits, quality = net_forward(net, x, tuple(bool(v) for v in normed.mask))
    else:
        logits, quality = sliding_window_infer(net, normed, window)
    return predict_labels(logits), quality


def case_region_dice(pred: np.ndarray, labels: np.ndarray) -> dict:
    p = merge_regions(pred)
    g = merge_regions(labels)
    return {name: dice_score(p[name], g[name]) for name in REGION_NAMES}


def aggregate_stability(per_combo: dict) -> dict:
    """Aggregate per-combination means into Avg / std / var / min / max.

    `per_combo` maps a region name to its 15 per-combination mean scores;
    values are used as given, so percent inputs yield percent aggregates.
    """
    agg = {}
    for name, values in per_combo.items():
        a = np.asarray(values, dtype=np.float64)
        if a.size == 0:
            raise ContractError(f"no combination scores for region {name}")
        agg[name] = {
            "avg": float(a.mean()),
            "std": float(a.std(ddof=0)),
            "var": float(a.var(ddof=0)),
            "min": float(a.min()),
            "max": float(a.max()),
        }
    return agg


@dataclass
class StabilityReport:
    """Per-combination region Dice means plus cross-combination aggregates."""
    n_cases: int
    combos: list                 # bool 4-lists, Table-1 column order
    per_combo: dict              # region -> per-combination mean scores (fractions)
    aggregate: dict              # region -> {avg, std, var, min, max}
    per_case: dict = field(default_factory=dict)    # region -> [combo][case]
    quality: Optional[list] = None                  # [combo][case][modality]
    meta: dict = field(default_factory=dict)        # seed, checkpoint id, ...

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "combos": self.combos,
            "per_combo": self.per_combo,
            "aggregate": self.aggregate,
            "per_case": self.per_case,
            "quality": self.quality,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityReport":
        return cls(n_cases=d["n_cases"], combos=d["combos"],
                   per_combo=d["per_combo"], aggregate=d["aggregate"],
                   per_case=d.get("per_case", {}), quality=d.get("quality"),
                   meta=d.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "StabilityReport":
        return cls.from_dict(json.loads(text))


def evaluate_combinations(net, bundles: Sequence[ModalityBundle],
                          window: Optional[int] = None,
                          combos: Optional[Sequence] = None,
                          meta: Optional[dict] = None) -> StabilityReport:
    """Score `net` on every bundle under each modality combination (all 15 by
    default).

    Bundles must carry all four modalities so each combination is testable.
    """
    if len(bundles) == 0:
        raise ContractError("evaluation needs at least one case")
    for i, b in enumerate(bundles):
        b.validate()
        if not b.mask.all():
            raise ContractError(f"case {i} is missing modalities; the "
                                "combination harness needs complete cases")
    if combos is None:
        combos = enumerate_combinations()
    else:
        combos = [np.asarray(c, dtype=bool) for c in combos]
        if not combos or any(c.shape != (4,) or not c.any() for c in combos):
            raise ContractError("combination list must hold non-empty 4-masks")
    per_case = {name: [] for name in REGION_NAMES}
    quality_all = []
    for combo in combos:
        scores = {name: [] for name in REGION_NAMES}
        q_combo = []
        for bundle in bundles:
            masked = apply_mask(bundle, combo)
            pred, quality = infer_case(net, masked, window=window)
            d = case_region_dice(pred, bundle.labels)
            for name in REGION_NAMES:
                scores[name].append(d[name])
            if quality is not None:
                q_combo.append([float(v) for v in quality.mean(axis=0)])
        for name in REGION_NAMES:
            per_case[name].append(scores[name])
        quality_all.append(q_combo)
    per_combo = {name: [float(np.mean(v)) for v in per_case[name]]
                 for name in REGION_NAMES}
    has_quality = any(len(q) for q in quality_all)
    return StabilityReport(
        n_cases=len(bundles),
        combos=[[bool(v) for v in c] for c in combos],
        per_combo=per_combo,
        aggregate=aggregate_stability(per_combo),
        per_case=per_case,
        quality=quality_all if has_quality else None,
        meta=dict(meta or {}),
    )


def held_out_bundles(spec, seed: int, count: int) -> list:
    """Deterministic evaluation set: `count` single-case bundles."""
    from .phantoms import generate
    ss = np.random.SeedSequence((seed, 0xE7A1))
    seeds = ss.generate_state(count, np.uint64)
    return [generate(spec, int(s), batch=1) for s in seeds]


__all__ = [
    "REGIONS", "REGION_NAMES", "MODALITIES", "dice_score", "region_mask",
    "merge_regions", "predict_labels", "stitch_windows",
    "sliding_window_infer", "net_forward", "infer_case", "case_region_dice",
    "aggregate_stability", "StabilityReport", "evaluate_combinations",
    "held_out_bundles",
]
