"""Hyperspectral cube I/O, patch extraction, episodes, and synthetic scenes.

Cubes live in memory as float32 (H, W, B) arrays in band-interleaved-by-pixel
layout on disk; everything downstream of patch extraction computes in
float64. All binary formats here are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HsiCube",
    "LabelMap",
    "Patch",
    "Episode",
    "SpectralPrior",
    "SynthConfig",
    "BandScale",
    "CubeFormatError",
    "ValidationError",
    "load_cube",
    "save_cube",
    "normalize_bands",
    "extract_patch",
    "extract_patch_block",
    "mirror_index",
    "sample_episode",
    "synth_scene",
    "random_prior",
    "load_prior",
    "save_prior",
    "save_map",
    "load_map",
    "save_pgm",
]

CUBE_MAGIC = b"SPHC"
CUBE_VERSION = 1
MAP_MAGIC = b"SPHM"
# refuse cubes whose element count cannot be a sane in-memory scene
MAX_ELEMENTS = 1 << 31


class ValidationError(ValueError):
    """Invalid argument or input data (CLI exit code 3)."""


class CubeFormatError(ValidationError):
    """Malformed container file; .code is one of bad_magic / truncated /
    dim_overflow / bad_version."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class HsiCube:
    """A reflectance cube with optional band-center wavelengths."""

    data: np.ndarray                       # (H, W, B) float32
    wavelengths: np.ndarray | None = None  # (B,) float64, strictly increasing

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"cube data must be 3-d, got {self.data.ndim}-d")
        if min(self.data.shape) < 1:
            raise ValidationError("cube extents must all be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("cube data contains non-finite values")
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (self.data.shape[2],):
                raise ValidationError("wavelength count must equal band count")
            if np.any(np.diff(wl) <= 0):
                raise ValidationError("wavelengths must be strictly increasing")
            self.wavelengths = wl

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    """Integer class ids per pixel; 0 means unlabeled."""

    labels: np.ndarray  # (H, W) uint16

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError("label map must be 2-d")
        if np.any(lab < 0) or np.any(lab > np.iinfo(np.uint16).max):
            raise ValidationError("label ids must fit in uint16")
        self.labels = np.ascontiguousarray(lab, dtype=np.uint16)

    def class_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass
class Patch:
    """An s x s x B window centered at (i, j), float64."""

    center: tuple[int, int]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        s = self.values.shape[0]
        if self.values.ndim != 3 or self.values.shape[1] != s:
            raise ValidationError("patch values must be s x s x B")
        if s % 2 == 0:
            raise ValidationError("patch side must be odd")

    @property
    def side(self) -> int:
        return self.values.shape[0]


@dataclass
class Episode:
    """One N-way K-shot episode with location-disjoint support and query."""

    n_way: int
    k_shot: int
    support_values: np.ndarray   # (N*K, s, s, B)
    support_labels: np.ndarray   # (N*K,) in 0..N-1
    query_values: np.ndarray     # (M_q, s, s, B)
    query_labels: np.ndarray     # (M_q,) in 0..N-1
    support_locs: np.ndarray     # (N*K, 2)
    query_locs: np.ndarray       # (M_q, 2)
    class_ids: np.ndarray        # (N,) original label-map ids
    seed: int = 0


@dataclass
class SpectralPrior:
    """A clean library spectrum for one material."""

    material: str
    t_prior: np.ndarray

    def __post_init__(self):
        self.t_prior = np.asarray(self.t_prior, dtype=np.float64)
        if self.t_prior.ndim != 1 or self.t_prior.size < 1:
            raise ValidationError("prior spectrum must be a non-empty vector")
        if not np.all(np.isfinite(self.t_prior)):
            raise ValidationError("prior spectrum contains non-finite values")


@dataclass
class SynthConfig:
    """Layout of a synthetic scene with sub-pixel target implants."""

    height: int = 48
    width: int = 48
    bands: int = 32
    background_classes: int = 4
    length_scale: float = 8.0
    implant_count: int = 20
    alpha_min: float = 0.4
    alpha_max: float = 1.0
    noise_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1:
            raise ValidationError("scene extents must be >= 1")
        if self.background_classes < 1:
            raise ValidationError("need at least one background class")
        if not (0.0 <= self.alpha_min <= self.alpha_max <= 1.0):
            raise ValidationError("abundance range must satisfy 0 <= min <= max <= 1")
        if not (0 <= self.implant_count < self.height * self.width):
            raise ValidationError("implant count must be < pixel count")
        if self.noise_std < 0 or self.length_scale <= 0:
            raise ValidationError("noise std must be >= 0 and length scale > 0")


@dataclass
class BandScale:
    """Per-band min/max recorded by normalize_bands, enough to invert it."""

    band_min: np.ndarray
    band_max: np.ndarray


# ---------------------------------------------------------------------------
# container format


def save_cube(cube: HsiCube, path, labels: LabelMap | None = None) -> None:
    h, w, b = cube.data.shape
    for extent in (h, w, b):
        if extent >= 1 << 32:
            raise CubeFormatError("dim_overflow", f"extent {extent} exceeds u32")
    flags = 0
    if cube.wavelengths is not None:
        flags |= 1
    if labels is not None:
        if labels.labels.shape != (h, w):
            raise ValidationError("label map extents do not match cube")
        flags |= 2
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<HIIIB", CUBE_VERSION, h, w, b, flags))
        if cube.wavelengths is not None:
            fh.write(cube.wavelengths.astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def load_cube(path) -> tuple[HsiCube, LabelMap | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CUBE_MAGIC:
        raise CubeFormatError("bad_magic", "bad magic in cube file")
    if len(blob) < 4 + struct.calcsize("<HIIIB"):
        raise CubeFormatError("truncated", "truncated cube header")
    version, h, w, b, flags = struct.unpack_from("<HIIIB", blob, 4)
    if version != CUBE_VERSION:
        raise CubeFormatError("bad_version", f"unsupported cube version {version}")
    if min(h, w, b) < 1 or h * w * b > MAX_ELEMENTS:
        raise CubeFormatError("dim_overflow", f"bad extents {h}x{w}x{b}")
    off = 4 + struct.calcsize("<HIIIB")

    def _grab(dtype, count):
        nonlocal off
        try:
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        except ValueError as exc:
            raise CubeFormatError("truncated", "truncated cube payload") from exc
        off += arr.itemsize * count
        return arr

    wavelengths = None
    if flags & 1:
        wavelengths = _grab("<f4", b).astype(np.float64)
    data = _grab("<f4", h * w * b).reshape(h, w, b)
    labels = None
    if flags & 2:
        labels = LabelMap(_grab("<u2", h * w).reshape(h, w).copy())
    return HsiCube(data.copy(), wavelengths), labels


# ---------------------------------------------------------------------------
# normalization and patches


def normalize_bands(cube: HsiCube) -> tuple[HsiCube, BandScale]:
    """Min-max scale each band to [0, 1] over the whole scene.

    Constant bands map to all zeros. The returned scale holds the original
    per-band min/max so the transform can be inverted.
    """
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(0, 1))
    hi = data.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (data - lo) / safe
    scaled[:, :, span == 0] = 0.0
    return HsiCube(scaled.astype(np.float32), cube.wavelengths), BandScale(lo, hi)


def mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map any integer index into [0, n) by reflection about the edges."""
    if n == 1:
        return np.zeros_like(np.asarray(idx))
    m = np.mod(idx, 2 * n - 2)
    return np.where(m >= n, 2 * n - 2 - m, m)


def extract_patch(cube: HsiCube, i: int, j: int, s: int) -> Patch:
    """Cut the s x s window at (i, j), mirror-reflecting past the borders."""
    if s % 2 == 0 or s < 1:
        raise ValidationError(f"patch side must be odd and positive, got {s}")
    h, w = cube.data.shape[:2]
    if not (0 <= i < h and 0 <= j < w):
        raise ValidationError(f"center ({i},{j}) outside {h}x{w} scene")
    half = s // 2
    rows = mirror_index(np.arange(i - half, i + half + 1), h)
    cols = mirror_index(np.arange(j - half, j + half + 1), w)
    values = cube.data[np.ix_(rows, cols)].astype(np.float64)
    return Patch(center=(i, j), values=values)


def extract_patch_block(cube: HsiCube, locs: np.ndarray, s: int) -> np.ndarray:
    """Mirror-padded s x s windows at many centers at once: (P, s, s, B)."""
    if s % 2 == 0 or s < 1:
        raise ValidationError(f"patch side must be odd and positive, got {s}")
    locs = np.asarray(locs, dtype=np.intp).reshape(-1, 2)
    h, w = cube.data.shape[:2]
    if locs.size and (locs.min() < 0 or locs[:, 0].max() >= h
                      or locs[:, 1].max() >= w):
        raise ValidationError("patch centers outside scene bounds")
    offs = np.arange(s) - s // 2
    rows = mirror_index(locs[:, 0:1] + offs, h)          # (P, s)
    cols = mirror_index(locs[:, 1:2] + offs, w)
    return cube.data[rows[:, :, None], cols[:, None, :]].astype(np.float64)


def _extract_many(cube: HsiCube, locs: np.ndarray, s: int) -> np.ndarray:
    if len(locs) == 0:
        return np.empty((0, s, s, cube.bands), dtype=np.float64)
    return extract_patch_block(cube, locs, s)


# ---------------------------------------------------------------------------
# episodes


def sample_episode(cube: HsiCube, labels: LabelMap, n_way: int, k_shot: int,
                   m_query: int, seed: int, patch_size: int = 5) -> Episode:
    """Draw one episode: N classes, K support and a share of M_q query
    pixels per class, support and query locations disjoint. Pure in seed."""
    rng = np.random.default_rng(seed)
    ids = labels.class_ids()
    if len(ids) < n_way:
        raise ValidationError(
            f"label map has {len(ids)} classes, episode needs {n_way}")
    chosen = np.sort(rng.choice(ids, size=n_way, replace=False))
    base, rem = divmod(m_query, n_way)
    sup_locs, sup_lab, qry_locs, qry_lab = [], [], [], []
    for local, cid in enumerate(chosen):
        want = k_shot + base + (1 if local < rem else 0)
        locs = np.argwhere(labels.labels == cid)
        if len(locs) < want:
            raise ValidationError(
                f"class {int(cid)} has {len(locs)} pixels, episode needs {want}")
        pick = locs[rng.choice(len(locs), size=want, replace=False)]
        sup_locs.append(pick[:k_shot])
        qry_locs.append(pick[k_shot:])
        sup_lab.extend([local] * k_shot)
        qry_lab.extend([local] * (want - k_shot))
    sup_locs = np.concatenate(sup_locs)
    qry_locs = (np.concatenate(qry_locs) if m_query > 0
                else np.empty((0, 2), dtype=np.intp))
    return Episode(
        n_way=n_way, k_shot=k_shot,
        support_values=_extract_many(cube, sup_locs, patch_size),
        support_labels=np.asarray(sup_lab, dtype=np.intp),
        query_values=_extract_many(cube, qry_locs, patch_size),
        query_labels=np.asarray(qry_lab, dtype=np.intp),
        support_locs=sup_locs, query_locs=qry_locs,
        class_ids=np.asarray(chosen), seed=seed)


# ---------------------------------------------------------------------------
# synthetic scenes


def _smooth_curves(rng: np.random.Generator, count: int, bands: int,
                   length_scale: float) -> np.ndarray:
    """Draw smooth random spectra from a squared-exponential process."""
    idx = np.arange(bands, dtype=np.float64)
    gap = idx[:, None] - idx[None, :]
    cov = np.exp(-0.5 * (gap / length_scale) ** 2)
    chol = np.linalg.cholesky(cov + 1e-8 * np.eye(bands))
    draws = rng.standard_normal((count, bands)) @ chol.T
    # shift each curve into a positive reflectance-like range
    draws = 0.5 + 0.18 * draws
    return np.clip(draws, 0.02, 0.98)


def random_prior(bands: int, seed: int, material: str = "target",
                 length_scale: float = 4.0) -> SpectralPrior:
    """A smooth random spectrum usable as a synthetic target signature."""
    rng = np.random.default_rng(seed)
    curve = _smooth_curves(rng, 1, bands, length_scale)[0]
    return SpectralPrior(material=material, t_prior=curve)


def synth_scene(cfg: SynthConfig,
                priors: list[SpectralPrior]) -> tuple[HsiCube, LabelMap, np.ndarray]:
    """Build a scene of smooth background regions with sub-pixel implants.

    Background pixels take the smooth spectrum of their region's class;
    regions are nearest-seed-point cells. Implant pixels mix the first
    prior into the local background: y = alpha * t + (1 - alpha) * b.
    Gaussian noise of cfg.noise_std is then added everywhere, so an
    implant with alpha = 0 is exactly the background pixel it replaced.
    Labels: background classes 1..C, implants C+1. Returns the cube, the
    label map, and a boolean implant mask.
    """
    cfg.validate()
    if not priors:
        raise ValidationError("synth_scene needs at least one prior")
    t_prior = priors[0].t_prior
    if t_prior.shape != (cfg.bands,):
        raise ValidationError("prior length must equal scene band count")
    root = np.random.SeedSequence(cfg.seed)
    kids = root.spawn(5)
    rng_curves = np.random.default_rng(kids[0])
    rng_region = np.random.default_rng(kids[1])
    rng_sites = np.random.default_rng(kids[2])
    rng_alpha = np.random.default_rng(kids[3])
    rng_noise = np.random.default_rng(kids[4])

    h, w, b, c = cfg.height, cfg.width, cfg.bands, cfg.background_classes
    curves = _smooth_curves(rng_curves, c, b, cfg.length_scale)

    # nearest-seed-point regions, at least one seed per class
    n_sites = max(c, (h * w) // 64)
    sites = np.column_stack([rng_region.integers(0, h, n_sites),
                             rng_region.integers(0, w, n_sites)])
    site_class = np.concatenate([np.arange(c),
                                 rng_region.integers(0, c, n_sites - c)])
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = ((ii[:, :, None] - sites[:, 0]) ** 2
          + (jj[:, :, None] - sites[:, 1]) ** 2)
    region = site_class[np.argmin(d2, axis=2)]           # (H, W)

    data = curves[region].astype(np.float64)             # (H, W, B)
    labels = (region + 1).astype(np.uint16)

    mask = np.zeros((h, w), dtype=bool)
    if cfg.implant_count > 0:
        flat = rng_sites.choice(h * w, size=cfg.implant_count, replace=False)
        locs = np.column_stack(np.unravel_index(flat, (h, w)))
        alphas = rng_alpha.uniform(cfg.alpha_min, cfg.alpha_max,
                                   size=cfg.implant_count)
        for (i, j), a in zip(locs, alphas):
            data[i, j] = a * t_prior + (1.0 - a) * data[i, j]
            mask[i, j] = True
            labels[i, j] = c + 1
    if cfg.noise_std > 0:
        data = data + rng_noise.normal(0.0, cfg.noise_std, size=data.shape)
    return HsiCube(data.astype(np.float32)), LabelMap(labels), mask


# ---------------------------------------------------------------------------
# prior files: lines of "wavelength,value" or bare values, # comments


def load_prior(path, band_count: int,
               wavelengths: np.ndarray | None = None) -> SpectralPrior:
    """Read a library spectrum and place it on a band_count grid.

    Bare-value files of exactly band_count entries pass through verbatim.
    Anything else is linearly interpolated: wavelength,value pairs onto
    the cube's wavelength grid when given, otherwise onto an even grid
    spanning the file's own range.
    """
    import os
    wl_list, val_list = [], []
    has_wl = False
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p for p in line.replace(",", " ").split() if p]
            try:
                nums = [float(p) for p in parts]
            except ValueError as exc:
                raise ValidationError(f"bad prior line {line!r}") from exc
            if len(nums) == 1:
                val_list.append(nums[0])
            elif len(nums) == 2:
                has_wl = True
                wl_list.append(nums[0])
                val_list.append(nums[1])
            else:
                raise ValidationError(f"bad prior line {line!r}")
    material = os.path.splitext(os.path.basename(str(path)))[0]
    values = np.asarray(val_list, dtype=np.float64)
    if has_wl:
        if len(wl_list) != len(val_list):
            raise ValidationError("prior mixes bare values and pairs")
        wl = np.asarray(wl_list, dtype=np.float64)
        if np.any(np.diff(wl) <= 0):
            raise ValidationError("prior wavelengths must be strictly increasing")
        if len(wl) < 2:
            raise ValidationError("need at least 2 samples to interpolate")
        grid = (np.asarray(wavelengths, dtype=np.float64) if wavelengths is not None
                else np.linspace(wl[0], wl[-1], band_count))
        if grid.shape != (band_count,):
            raise ValidationError("wavelength grid length must equal band count")
        return SpectralPrior(material, np.interp(grid, wl, values))
    if values.size == band_count:
        return SpectralPrior(material, values)
    if values.size < 2:
        raise ValidationError("need at least 2 samples to interpolate")
    src = np.linspace(0.0, 1.0, values.size)
    dst = np.linspace(0.0, 1.0, band_count)
    return SpectralPrior(material, np.interp(dst, src, values))


def save_prior(prior: SpectralPrior, path,
               wavelengths: np.ndarray | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# material: {prior.material}\n")
        if wavelengths is not None:
            for wl, v in zip(wavelengths, prior.t_prior):
                fh.write(f"{wl:.6f},{v:.8f}\n")
        else:
            for v in prior.t_prior:
                fh.write(f"{v:.8f}\n")


# ---------------------------------------------------------------------------
# detection-map raster


def save_map(scores: np.ndarray, path) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValidationError("detection map must be 2-d")
    h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(scores.astype("<f4").tobytes())


def load_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAP_MAGIC:
        raise CubeFormatError("bad_magic", "bad magic in map file")
    if len(blob) < 12:
        raise CubeFormatError("truncated", "truncated map header")
    h, w = struct.unpack_from("<II", blob, 4)
    if h * w == 0 or h * w > MAX_ELEMENTS:
        raise CubeFormatError("dim_overflow", f"bad extents {h}x{w}")
    try:
        arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=12)
    except ValueError as exc:
        raise CubeFormatError("truncated", "truncated map payload") from exc
    return arr.reshape(h, w).astype(np.float64)


def save_pgm(scores: np.ndarray, path) -> None:
    """16-bit binary portable graymap of a [0,1] score map, for viewing."""
    scores = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    h, w = scores.shape
    gray = np.round(scores * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())
