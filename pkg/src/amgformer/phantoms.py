"""Synthetic multi-modal brain phantoms.

A case is a brain ellipsoid containing three nested tumor ellipsoids:
whole tumor (edema envelope), tumor core, and enhancing tumor. Labels are
assigned by region intersection, so ET <= TC <= WT holds by construction
even under center jitter. Each modality renders the same geometry with its
own tissue intensity profile plus Gaussian noise; outside the brain the
volume is exactly zero.

The default intensity table is chosen so that no single modality separates
all three regions: FLAIR carries the edema boundary, T1CE the enhancing
rim, T1 the core, and T2 is an in-between blend.

All randomness flows through one generator in a fixed draw order, so a
(spec, seed) pair reproduces a case bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError, DegenerateError, ParameterError

MODALITIES = ("FLAIR", "T1CE", "T1", "T2")

# rows: background, edema, necrotic core, enhancing; columns follow MODALITIES
DEFAULT_INTENSITY = (
    (0.20, 0.20, 0.20, 0.20),
    (0.90, 0.30, 0.35, 0.70),
    (0.50, 0.45, 0.70, 0.55),
    (0.55, 1.00, 0.50, 0.60),
)

# Table layout order for the 15 non-empty availability subsets, as
# (FLAIR, T1CE, T1, T2) bits: singles, pairs, triples, then all four.
COMBINATIONS = (
    (False, False, False, True),
    (False, False, True, False),
    (False, True, False, False),
    (True, False, False, False),
    (False, False, True, True),
    (False, True, True, False),
    (True, True, False, False),
    (False, True, False, True),
    (True, False, False, True),
    (True, False, True, False),
    (True, True, True, False),
    (True, True, False, True),
    (True, False, True, True),
    (False, True, True, True),
    (True, True, True, True),
)


def enumerate_combinations() -> list:
    return [np.array(m, dtype=bool) for m in COMBINATIONS]


@dataclass
class PhantomSpec:
    size: int = 32
    brain_radius: tuple = (12.0, 14.0)
    wt_radius: tuple = (7.0, 10.0)
    tc_radius: tuple = (3.5, 5.5)
    et_radius: tuple = (1.5, 2.8)
    wt_jitter: float = 2.0      # max |offset| of the WT center from volume center
    inner_jitter: float = 1.0   # max |offset| of TC/ET centers from their parent
    noise_sigma: float = 0.05
    blur_sigma: float = 1.5     # artifact injection
    artifact_noise: float = 0.10
    intensity: tuple = DEFAULT_INTENSITY

    def __post_init__(self):
        table = np.asarray(self.intensity, dtype=np.float64)
        if table.shape != (4, 4):
            raise ParameterError(f"intensity table must be 4x4, got {table.shape}")
        for name, rng_ in (("brain", self.brain_radius), ("wt", self.wt_radius),
                           ("tc", self.tc_radius), ("et", self.et_radius)):
            lo, hi = rng_
            if not 0 < lo <= hi:
                raise ParameterError(f"{name}_radius range {rng_} is not valid")
        if not (self.et_radius[1] < self.tc_radius[0]
                and self.tc_radius[1] < self.wt_radius[0]
                and self.wt_radius[1] < self.brain_radius[0]):
            raise ParameterError(
                "radius ranges must nest strictly: et < tc < wt < brain")
        if self.size < 8:
            raise ParameterError(f"size must be >= 8, got {self.size}")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.artifact_noise < 0:
            raise ParameterError("noise and blur parameters must be >= 0")


@dataclass
class ModalityBundle:
    volumes: list                 # 4 arrays (B,1,D,H,W) float32
    mask: np.ndarray              # (4,) bool
    labels: np.ndarray            # (B,D,H,W) uint8

    def validate(self):
        if len(self.volumes) != 4:
            raise DataError(f"bundle needs 4 volumes, got {len(self.volumes)}")
        b, _, d, h, w = self.volumes[0].shape
        for m, v in enumerate(self.volumes):
            if v.shape != (b, 1, d, h, w):
                raise DataError(f"volume {m} shape {v.shape} != {(b, 1, d, h, w)}")
            if not self.mask[m] and v.any():
                raise DataError(f"masked-absent modality {m} is not zero-filled")
        if self.labels.shape != (b, d, h, w):
            raise DataError(f"labels shape {self.labels.shape} != {(b, d, h, w)}")
        if self.labels.max(initial=0) > 3:
            raise DataError("labels outside {0..3}")

    def stacked(self) -> np.ndarray:
        """-> (B,4,D,H,W) in modality order."""
        return np.concatenate(self.volumes, axis=1)

    def copy(self) -> "ModalityBundle":
        return ModalityBundle([v.copy() for v in self.volumes],
                              self.mask.copy(), self.labels.copy())


def _ellipsoid_mask(size: int, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    grid = np.indices((size, size, size), dtype=np.float64)
    q = ((grid - center.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)) ** 2
    return q.sum(axis=0) <= 1.0


def _draw_case(spec: PhantomSpec, rng: np.random.Generator):
    """Fixed draw order: radii (brain, wt, tc, et), then centers."""
    radii = {}
    for name, lohi in (("brain", spec.brain_radius), ("wt", spec.wt_radius),
                       ("tc", spec.tc_radius), ("et", spec.et_radius)):
        radii[name] = rng.uniform(lohi[0], lohi[1], size=3)
    mid = np.full(3, (spec.size - 1) / 2.0)
    centers = {"brain": mid}
    centers["wt"] = mid + rng.uniform(-spec.wt_jitter, spec.wt_jitter, size=3)
    centers["tc"] = centers["wt"] + rng.uniform(-spec.inner_jitter, spec.inner_jitter, size=3)
    centers["et"] = centers["tc"] + rng.uniform(-spec.inner_jitter, spec.inner_jitter, size=3)
    return centers, radii


def case_labels(spec: PhantomSpec, centers: dict, radii: dict):
    """-> (labels (D,H,W) uint8, brain mask). Intersection keeps nesting."""
    brain = _ellipsoid_mask(spec.size, centers["brain"], radii["brain"])
    wt = _ellipsoid_mask(spec.size, centers["wt"], radii["wt"]) & brain
    tc = _ellipsoid_mask(spec.size, centers["tc"], radii["tc"]) & wt
    et = _ellipsoid_mask(spec.size, centers["et"], radii["et"]) & tc
    labels = np.zeros((spec.size,) * 3, dtype=np.uint8)
    labels[wt] = 1
    labels[tc] = 2
    labels[et] = 3
    return labels, brain


def generate(spec: PhantomSpec, seed: int, batch: int = 1) -> ModalityBundle:
    rng = np.random.default_rng(seed)
    table = np.asarray(spec.intensity, dtype=np.float64)
    s = spec.size
    vols = np.zeros((batch, 4, s, s, s), dtype=np.float64)
    labels = np.zeros((batch, s, s, s), dtype=np.uint8)
    for b in range(batch):
        centers, radii = _draw_case(spec, rng)
        lab, brain = case_labels(spec, centers, radii)
        labels[b] = lab
        for m in range(4):
            v = table[lab, m]
            if spec.noise_sigma > 0:
                v = v + rng.normal(0.0, spec.noise_sigma, size=v.shape)
            vols[b, m] = np.where(brain, v, 0.0)
    volumes = [vols[:, m:m + 1].astype(np.float32) for m in range(4)]
    return ModalityBundle(volumes, np.ones(4, dtype=bool), labels)


def apply_mask(bundle: ModalityBundle, mask: Sequence[bool]) -> ModalityBundle:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (4,):
        raise ParameterError(f"mask must have 4 bits, got shape {mask.shape}")
    combined = bundle.mask & mask
    if not combined.any():
        raise ContractError("mask removes every modality")
    volumes = [v.copy() if combined[m] else np.zeros_like(v)
               for m, v in enumerate(bundle.volumes)]
    return ModalityBundle(volumes, combined, bundle.labels.copy())


def normalize_zscore(volume: np.ndarray) -> np.ndarray:
    """Z-score over the nonzero (foreground) voxels; zeros stay zero.
    An all-zero volume passes through (the absent-modality convention)."""
    fg = volume != 0
    if not fg.any():
        return volume.copy()
    vals = volume[fg].astype(np.float64)
    std = vals.std()
    if std == 0.0:
        raise DegenerateError("constant foreground has no z-score")
    out = np.zeros_like(volume)
    out[fg] = ((vals - vals.mean()) / std).astype(volume.dtype)
    return out


def normalize_bundle(bundle: ModalityBundle) -> ModalityBundle:
    volumes = []
    for v in bundle.volumes:
        nv = np.empty_like(v)
        for b in range(v.shape[0]):
            nv[b, 0] = normalize_zscore(v[b, 0])
        volumes.append(nv)
    return ModalityBundle(volumes, bundle.mask.copy(), bundle.labels.copy())


def _rotate(arr: np.ndarray, angle: float, axes: tuple, order: int) -> np.ndarray:
    if angle == 0.0:
        return arr.copy()
    return ndimage.rotate(arr, angle, axes=axes, reshape=False, order=order,
                          mode="constant", cval=0.0)


def apply_geometric(bundle: ModalityBundle, angle: float, axes: tuple,
                    flips: Sequence[bool]) -> ModalityBundle:
    """One rigid transform for all volumes and labels: rotate in the given
    spatial axis pair (trilinear for images, nearest for labels), then flip
    the chosen spatial axes."""
    volumes = []
    for v in bundle.volumes:
        out = np.empty_like(v)
        for b in range(v.shape[0]):
            out[b, 0] = _rotate(v[b, 0], angle, axes, order=1)
        volumes.append(out)
    labels = np.empty_like(bundle.labels)
    for b in range(labels.shape[0]):
        labels[b] = _rotate(bundle.labels[b], angle, axes, order=0)
    flip_axes = tuple(i for i, f in enumerate(flips) if f)
    if flip_axes:
        vol_axes = tuple(a + 2 for a in flip_axes)
        volumes = [np.flip(v, axis=vol_axes).copy() for v in volumes]
        labels = np.flip(labels, axis=tuple(a + 1 for a in flip_axes)).copy()
    return ModalityBundle(volumes, bundle.mask.copy(), labels)


def augment(bundle: ModalityBundle, seed: int) -> ModalityBundle:
    """Draw order: angle, axis pair, flips, per-modality intensity scales."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-10.0, 10.0)
    axes = ((0, 1), (0, 2), (1, 2))[rng.integers(3)]
    flips = rng.random(3) < 0.5
    scales = rng.uniform(0.9, 1.1, size=4)
    out = apply_geometric(bundle, angle, axes, flips)
    for m in range(4):
        if bundle.mask[m]:
            out.volumes[m] *= np.float32(scales[m])
    return out


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur3(volume: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with circular boundaries. Every voxel's
    outgoing kernel mass is exactly 1, so the volume sum (and mean) is
    preserved; zero-padding with renormalization measurably is not."""
    if sigma == 0.0:
        return volume.copy()
    k = _gauss_kernel(sigma)
    out = volume.astype(np.float64)
    for axis in range(volume.ndim):
        out = ndimage.convolve1d(out, k, axis=axis, mode="wrap")
    return out.astype(volume.dtype)


def inject_artifact(bundle: ModalityBundle, modality: int, spec: PhantomSpec,
                    seed: int = 0) -> ModalityBundle:
    """Blur-plus-noise degradation of a single present modality."""
    if not 0 <= modality < 4:
        raise ParameterError(f"modality index {modality} out of range")
    if not bundle.mask[modality]:
        raise ContractError(f"modality {MODALITIES[modality]} is absent")
    out = bundle.copy()
    v = out.volumes[modality]
    for b in range(v.shape[0]):
        v[b, 0] = blur3(v[b, 0], spec.blur_sigma)
    if spec.artifact_noise > 0:
        rng = np.random.default_rng(seed)
        v += rng.normal(0.0, spec.artifact_noise, size=v.shape).astype(v.dtype)
    return out
