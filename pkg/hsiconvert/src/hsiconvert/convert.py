"""Converters from public dataset formats to the native scene format.

The detection package reads exactly one bespoke cube format; this
module owns every third-party format so that stays true. All entry
points echo what they wrote to standard output, write 32-bit float
data interleaved band-by-pixel, and raise ConvertError on structural
problems with the input.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.io

from specdetect.hsio import (CUBE_MAGIC, HsiCube, LabelMap, SpectralPrior,
                             load_cube, save_cube, save_prior)

__all__ = [
    "ConvertError",
    "SourceDescriptor",
    "apply_class_cap",
    "convert_container",
    "convert_envi",
    "convert_prior",
    "parse_envi_header",
    "to_bip",
]


class ConvertError(ValueError):
    """The input cannot be converted: bad structure or missing fields."""


BAND_ORDERS = ("bip", "bil", "bsq")

# numeric type codes this tool reads from image headers
ENVI_DTYPES = {1: "u1", 2: "i2", 3: "i4", 4: "f4", 5: "f8", 12: "u2"}

ENVI_REQUIRED = ("samples", "lines", "bands", "interleave", "data type")


@dataclass
class SourceDescriptor:
    """Where a container cube lives and how to read it.

    band_order names the axis layout of the stored array: bip is
    (height, width, band), bil is (height, band, width), bsq is
    (band, height, width). class_cap, when set, relabels any class
    holding more than that many pixels to 0.
    """

    path: str
    cube_var: str = "data"
    gt_var: str | None = None
    band_order: str = "bip"
    class_cap: int | None = None

    def validate(self) -> None:
        if not self.cube_var:
            raise ConvertError("cube variable name must be non-empty")
        if self.gt_var is not None and not self.gt_var:
            raise ConvertError("ground-truth variable name must be non-empty")
        if self.band_order not in BAND_ORDERS:
            raise ConvertError(f"unknown band order {self.band_order!r}; "
                               f"expected one of {BAND_ORDERS}")
        if self.class_cap is not None and self.class_cap < 1:
            raise ConvertError("class cap must be >= 1")


def to_bip(values: np.ndarray, band_order: str) -> np.ndarray:
    """Reorder a rank-3 array to (height, width, band)."""
    if band_order == "bip":
        return values
    if band_order == "bil":
        return values.transpose(0, 2, 1)
    if band_order == "bsq":
        return values.transpose(1, 2, 0)
    raise ConvertError(f"unknown band order {band_order!r}; "
                       f"expected one of {BAND_ORDERS}")


def apply_class_cap(labels: np.ndarray, cap: int) -> tuple[np.ndarray, list[int]]:
    """Relabel classes holding more than cap pixels to 0 (unlabeled)."""
    if cap < 1:
        raise ConvertError("class cap must be >= 1")
    out = labels.copy()
    dropped = []
    for cid in np.unique(labels):
        if cid == 0:
            continue
        if int((labels == cid).sum()) > cap:
            out[labels == cid] = 0
            dropped.append(int(cid))
    return out, dropped


def _is_sphc(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(CUBE_MAGIC)) == CUBE_MAGIC
    except OSError:
        return False


def _ensure_parent(out_path) -> None:
    parent = os.path.dirname(str(out_path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _passthrough(in_path, out_path) -> tuple[int, int, int]:
    """Already-native input: validate, then copy byte for byte."""
    cube, _ = load_cube(in_path)
    with open(in_path, "rb") as fh:
        blob = fh.read()
    _ensure_parent(out_path)
    with open(out_path, "wb") as fh:
        fh.write(blob)
    print(f"{out_path}: already native, copied verbatim "
          f"({cube.height}x{cube.width}x{cube.bands})")
    return cube.data.shape


def _as_labels(raw: np.ndarray, name: str, extents) -> LabelMap:
    arr = np.squeeze(np.asarray(raw))
    if arr.ndim != 2:
        raise ConvertError(f"variable {name!r} has rank {arr.ndim} "
                           f"after squeezing, need 2")
    if arr.shape != extents:
        raise ConvertError(f"label extents {arr.shape} do not match "
                           f"cube extents {extents}")
    if not np.all(np.isfinite(arr.astype(np.float64))):
        raise ConvertError(f"variable {name!r} contains non-finite values")
    rounded = np.rint(arr.astype(np.float64))
    if not np.array_equal(rounded, arr.astype(np.float64)):
        raise ConvertError(f"variable {name!r} holds non-integer labels")
    if rounded.min() < 0 or rounded.max() > 0xFFFF:
        raise ConvertError(f"labels in {name!r} must lie in [0, 65535]")
    return LabelMap(rounded.astype(np.uint16))


def convert_container(desc: SourceDescriptor, out_path) -> tuple[int, int, int]:
    """MATLAB container to a native scene file.

    Float data is cast to 32-bit and stored interleaved by pixel;
    labels go to uint16. Returns the written (height, width, bands).
    """
    desc.validate()
    if _is_sphc(desc.path):
        return _passthrough(desc.path, out_path)
    try:
        mat = scipy.io.loadmat(desc.path)
    except NotImplementedError as exc:
        raise ConvertError(f"cannot read {desc.path}: {exc} "
                           f"(7.3-format files are HDF5; resave as v7 "
                           f"or earlier)") from exc
    except Exception as exc:
        # the reader trusts header bytes, so corrupt input can surface
        # as nearly any exception type; the try block holds only the call
        detail = f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
        raise ConvertError(f"cannot read {desc.path}: {detail}") from exc
    names = sorted(k for k in mat if not k.startswith("__"))
    if desc.cube_var not in mat:
        raise ConvertError(f"variable {desc.cube_var!r} not found; "
                           f"file holds {names}")
    raw = np.asarray(mat[desc.cube_var])
    if raw.ndim != 3:
        raise ConvertError(f"variable {desc.cube_var!r} has rank "
                           f"{raw.ndim}, need 3")
    data = to_bip(raw, desc.band_order).astype(np.float32)

    labels = None
    if desc.gt_var is not None:
        if desc.gt_var not in mat:
            raise ConvertError(f"variable {desc.gt_var!r} not found; "
                               f"file holds {names}")
        labels = _as_labels(mat[desc.gt_var], desc.gt_var, data.shape[:2])
        if desc.class_cap is not None:
            capped, dropped = apply_class_cap(labels.labels, desc.class_cap)
            labels = LabelMap(capped)
            if dropped:
                print(f"class cap {desc.class_cap}: relabeled "
                      f"classes {dropped} to 0")

    cube = HsiCube(data)
    _ensure_parent(out_path)
    save_cube(cube, out_path, labels=labels)
    h, w, b = cube.data.shape
    print(f"{out_path}: {h}x{w}x{b}"
          + (" with labels" if labels is not None else ""))
    return h, w, b


# -- image + header pairs -----------------------------------------------------

def parse_envi_header(text: str) -> dict[str, str]:
    """Key = value fields; brace-wrapped values may span lines."""
    fields: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.upper() == "ENVI" or line.startswith(";"):
            continue
        if "=" not in line:
            raise ConvertError(f"malformed header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if value.startswith("{"):
            while "}" not in value:
                if i >= len(lines):
                    raise ConvertError(f"unterminated brace block "
                                       f"for {key!r}")
                value += " " + lines[i].strip()
                i += 1
            value = value[1:value.index("}")].strip()
        fields[key.lower()] = value
    return fields


def _envi_data_path(header_path) -> str:
    header_path = str(header_path)
    base = (header_path[:-4] if header_path.lower().endswith(".hdr")
            else header_path)
    candidates = [base, base + ".img", base + ".dat", base + ".raw"]
    for cand in candidates:
        if cand != header_path and os.path.isfile(cand):
            return cand
    raise ConvertError(f"no data file next to {header_path}; "
                       f"tried {candidates}")


def convert_envi(header_path, out_path) -> tuple[int, int, int]:
    """Header-described raster to a native scene file.

    Any of the three interleaves is normalized to band-interleaved by
    pixel; wavelengths are carried over when the header lists them.
    """
    if _is_sphc(header_path):
        return _passthrough(header_path, out_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        fields = parse_envi_header(fh.read())
    for key in ENVI_REQUIRED:
        if key not in fields:
            raise ConvertError(f"header is missing {key!r}")
    try:
        samples = int(fields["samples"])
        lines = int(fields["lines"])
        bands = int(fields["bands"])
        code = int(fields["data type"])
        offset = int(fields.get("header offset", "0"))
        order = int(fields.get("byte order", "0"))
    except ValueError as exc:
        raise ConvertError(f"non-integer header field: {exc}") from exc
    if min(samples, lines, bands) < 1:
        raise ConvertError("samples, lines, and bands must all be >= 1")
    if code not in ENVI_DTYPES:
        raise ConvertError(f"unsupported data type code {code}; "
                           f"supported codes: {sorted(ENVI_DTYPES)}")
    if order not in (0, 1):
        raise ConvertError(f"byte order must be 0 or 1, got {order}")
    if offset < 0:
        raise ConvertError("header offset must be >= 0")
    interleave = fields["interleave"].lower()
    if interleave not in BAND_ORDERS:
        raise ConvertError(f"unknown interleave {fields['interleave']!r}; "
                           f"expected one of {BAND_ORDERS}")
    dtype = np.dtype(ENVI_DTYPES[code]).newbyteorder(
        "<" if order == 0 else ">")

    data_path = _envi_data_path(header_path)
    with open(data_path, "rb") as fh:
        fh.seek(offset)
        blob = fh.read()
    count = samples * lines * bands
    flat = np.frombuffer(blob[:count * dtype.itemsize], dtype=dtype)
    if flat.size < count:
        raise ConvertError(f"{data_path} holds {flat.size} values, "
                           f"header implies {count}")
    flat = flat.astype(np.float64)
    if interleave == "bip":
        values = flat.reshape(lines, samples, bands)
    elif interleave == "bil":
        values = flat.reshape(lines, bands, samples)
    else:
        values = flat.reshape(bands, lines, samples)
    data = to_bip(values, interleave)

    wavelengths = None
    if "wavelength" in fields:
        try:
            wavelengths = np.asarray(
                [float(p) for p in fields["wavelength"].replace(",", " ").split()])
        except ValueError as exc:
            raise ConvertError(f"bad wavelength block: {exc}") from exc
        if wavelengths.size != bands:
            raise ConvertError(f"{wavelengths.size} wavelengths "
                               f"for {bands} bands")

    cube = HsiCube(data.astype(np.float32), wavelengths=wavelengths)
    _ensure_parent(out_path)
    save_cube(cube, out_path)
    print(f"{out_path}: {lines}x{samples}x{bands} from {interleave.upper()}"
          + (", wavelengths carried" if wavelengths is not None else ""))
    return lines, samples, bands


# -- spectral library text ------------------------------------------------------

def convert_prior(in_path, out_path) -> int:
    """Library spectrum text to the canonical prior file.

    Accepts bare values or wavelength,value pairs with # or ;
    comments, any of comma/space separation. Returns the sample count.
    """
    wl: list[float] = []
    values: list[float] = []
    has_wl = False
    material = None
    with open(in_path, "r", encoding="utf-8") as fh:
        for line in fh:
            comment = line.split("#", 1)[1].strip() if "#" in line else ""
            if material is None and comment.lower().startswith("material:"):
                material = comment.split(":", 1)[1].strip() or None
            line = line.split("#", 1)[0].split(";", 1)[0].strip()
            if not line:
                continue
            try:
                nums = [float(p) for p in line.replace(",", " ").split()]
            except ValueError as exc:
                raise ConvertError(f"bad spectrum line {line!r}") from exc
            if len(nums) == 1:
                values.append(nums[0])
            elif len(nums) == 2:
                has_wl = True
                wl.append(nums[0])
                values.append(nums[1])
            else:
                raise ConvertError(f"bad spectrum line {line!r}")
    if not values:
        raise ConvertError(f"{in_path} holds no spectrum samples")
    if has_wl and len(wl) != len(values):
        raise ConvertError("spectrum mixes bare values and "
                           "wavelength,value pairs")
    if material is None:
        material = os.path.splitext(os.path.basename(str(in_path)))[0]
    prior = SpectralPrior(material, np.asarray(values))
    _ensure_parent(out_path)
    save_prior(prior, out_path,
               wavelengths=np.asarray(wl) if has_wl else None)
    print(f"{out_path}: {len(values)} samples"
          + (" with wavelengths" if has_wl else ""))
    return len(values)
