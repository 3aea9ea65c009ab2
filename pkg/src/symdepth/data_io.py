"""File formats: SDT1 tensor containers, binary PNM images, dataset manifests,
sample loading with teacher pseudo-masks, and parameter directories.

SDT1 layout (all little-endian)::

    b"SDT1" | u32 ndim | ndim x u32 dims | u8 dtype code | row-major payload

dtype codes: 1 = f64, 2 = f32, 3 = u16, 4 = u8.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .augment import Sample
from .tensor import Tensor

MAGIC = b"SDT1"
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<u2"), 4: np.dtype("<u1")}
_CODE_OF = {dt.newbyteorder("="): code for code, dt in DTYPE_CODES.items()}
U16_DEPTH_SCALE = 256.0
PARAM_INDEX = "index.tsv"


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, path: str | os.PathLike | None = None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- containers
def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported container dtype {arr.dtype}; use float64, float32, uint16 or uint8")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write a non-finite tensor")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", 0, path)
    pos = 4
    if len(buf) < pos + 4:
        raise FormatError("truncated header: missing ndim", pos, path)
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * ndim + 1:
        raise FormatError(f"truncated header: expected {ndim} dims and a dtype code", pos, path)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    code = buf[pos]
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", pos, path)
    pos += 1
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - pos
    if have < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {have}", len(buf), path)
    if have > expected:
        raise FormatError(f"trailing garbage: {have - expected} bytes after payload", pos + expected, path)
    return np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=pos).reshape(dims).astype(
        dtype.newbyteorder("=")
    )


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), path)


def depth_to_meters(raw: np.ndarray) -> np.ndarray:
    """Float payloads are meters already; u16 payloads store meters x 256."""
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / U16_DEPTH_SCALE
    if raw.dtype.kind == "f":
        return raw.astype(np.float64)
    raise TypeError(f"depth payload must be f32, f64 or u16, not {raw.dtype}")


# ----------------------------------------------------------------------- PNM
_WS = b" \t\n\r\v\f"


def _pnm_header(buf: bytes, path) -> tuple[bytes, list[int], int]:
    """Parse magic + three integers; return (magic, [w, h, maxval], raster offset)."""
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {buf[:2]!r}; expected P5 or P6", 0, path)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header", pos, path)
        ch = buf[pos : pos + 1]
        if ch in _WS and ch:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        else:
            m = re.compile(rb"\d+").match(buf, pos)
            if m is None:
                raise FormatError(f"expected a decimal integer, found {ch!r}", pos, path)
            if m.end() < len(buf) and buf[m.end() : m.end() + 1] not in _WS + b"#":
                raise FormatError("malformed integer", m.end(), path)
            values.append(int(m.group()))
            pos = m.end()
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise FormatError("missing whitespace after maxval", pos, path)
    return buf[:2], values, pos + 1


def decode_pnm(buf: bytes, path=None) -> np.ndarray:
    magic, (w, h, maxval), pos = _pnm_header(buf, path)
    if w == 0 or h == 0:
        raise FormatError(f"empty image {w}x{h}", 3, path)
    if maxval not in (255, 65535):
        raise FormatError(f"maxval {maxval} unsupported; expected 255 or 65535", pos - 1, path)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    expected = w * h * channels * dtype.itemsize
    have = len(buf) - pos
    if have < expected:
        raise FormatError(f"truncated raster: expected {expected} bytes, found {have}", len(buf), path)
    if have > expected:
        raise FormatError(f"trailing garbage: {have - expected} bytes after raster", pos + expected, path)
    raw = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos)
    return raw.reshape(h, w, channels).astype(np.float64) / maxval


def read_image_pnm(path) -> np.ndarray:
    """Binary PGM/PPM to float64 [H, W, C] scaled to [0, 1]."""
    return decode_pnm(Path(path).read_bytes(), path)


def encode_pnm(image: np.ndarray, maxval: int = 255) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"PNM needs [H, W], [H, W, 1] or [H, W, 3]; got {img.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    if not np.all(np.isfinite(img)):
        raise ValueError("refusing to write a non-finite image")
    h, w, c = img.shape
    dtype = ">u2" if maxval == 65535 else "u1"
    raster = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(dtype)
    magic = "P6" if c == 3 else "P5"
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii") + raster.tobytes()


def write_pnm(path, image: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pnm(image, maxval))


# ------------------------------------------------------------------ manifest
@dataclass(frozen=True)
class Record:
    image_path: Path
    depth_path: Path
    teacher_mask_path: Path | None = None
    gt_mask_path: Path | None = None


@dataclass(frozen=True)
class Manifest:
    records: tuple[Record, ...]
    d_min: float | None = None
    d_max: float | None = None
    max_depth: float | None = None

    @property
    def bounds(self) -> tuple[float, float] | None:
        return None if self.d_min is None or self.d_max is None else (self.d_min, self.d_max)


_BOUND_KEYS = ("d_min", "d_max", "max_depth")


def parse_manifest(text: str, base: Path, check_paths: bool = True) -> Manifest:
    """Tab-separated ``image, depth[, teacher[, gt]]`` rows; ``-`` marks a missing mask.

    ``key=value`` lines set ``d_min``, ``d_max`` and ``max_depth``; ``#`` starts a comment.
    Relative paths resolve against ``base``.
    """
    records = []
    bounds: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "\t" not in line and "=" in line:
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in _BOUND_KEYS:
                raise ManifestError(f"line {lineno}: unknown setting {key!r}")
            try:
                bounds[key] = float(value)
            except ValueError:
                raise ManifestError(f"line {lineno}: {key} is not a number: {value!r}") from None
            continue
        fields = [f.strip() for f in line.split("\t")]
        if not 2 <= len(fields) <= 4:
            raise ManifestError(f"line {lineno}: expected 2 to 4 tab-separated fields, found {len(fields)}")
        fields += ["-"] * (4 - len(fields))
        paths = []
        for i, f in enumerate(fields):
            if f == "-":
                if i < 2:
                    raise ManifestError(f"line {lineno}: image and depth paths are required")
                paths.append(None)
                continue
            p = Path(f) if Path(f).is_absolute() else base / f
            if check_paths and not p.is_file():
                raise ManifestError(f"line {lineno}: no such file {p}")
            paths.append(p)
        records.append(Record(*paths))
    for key, v in bounds.items():
        if not (v > 0 and np.isfinite(v)):
            raise ManifestError(f"{key} must be positive, got {v}")
    if "d_min" in bounds and "d_max" in bounds and not bounds["d_min"] < bounds["d_max"]:
        raise ManifestError(f"d_min {bounds['d_min']} must be below d_max {bounds['d_max']}")
    return Manifest(tuple(records), **bounds)


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def format_manifest(manifest: Manifest, base: Path | None = None) -> str:
    lines = [f"{k}={getattr(manifest, k)!r}" for k in _BOUND_KEYS if getattr(manifest, k) is not None]
    for r in manifest.records:
        cells = []
        for p in (r.image_path, r.depth_path, r.teacher_mask_path, r.gt_mask_path):
            if p is None:
                cells.append("-")
            elif base is not None:
                cells.append(os.path.relpath(p, base))
            else:
                cells.append(str(p))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    path.write_text(format_manifest(manifest, path.parent), encoding="utf-8")


# ------------------------------------------------------------------- samples
def _read_image_any(path: Path) -> np.ndarray:
    if path.suffix == ".sdt":
        img = read_tensor(path).astype(np.float64)
    else:
        img = read_image_pnm(path)
    if img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def _as_plane(arr: np.ndarray) -> np.ndarray:
    return arr[..., None] if arr.ndim == 2 else arr


def _read_mask(path: Path, class_count: int) -> np.ndarray:
    raw = read_tensor(path)
    if raw.dtype not in (np.uint8, np.uint16):
        raise TypeError(f"{path}: semantic masks must be u8 or u16, not {raw.dtype}")
    mask = _as_plane(raw).astype(np.int64)
    if mask.size and mask.max() > class_count:
        raise ValueError(f"{path}: class index {mask.max()} exceeds ignore label {class_count}")
    return mask


def load_sample(record: Record, class_count: int) -> Sample:
    """Image, metric depth and class indices for one record.

    Ground-truth masks take precedence over teacher pseudo-masks; with neither,
    every pixel carries the ignore label ``class_count``.
    """
    image = _read_image_any(Path(record.image_path))
    depth = _as_plane(depth_to_meters(read_tensor(record.depth_path)))
    mask_path = record.gt_mask_path or record.teacher_mask_path
    if mask_path is not None:
        sem = _read_mask(Path(mask_path), class_count)
    else:
        sem = np.full(image.shape[:2] + (1,), class_count, dtype=np.int64)
    h, w = image.shape[:2]
    if image.ndim != 3 or image.shape[2] != 3 or depth.shape != (h, w, 1) or sem.shape != (h, w, 1):
        raise ValueError(
            f"sample planes disagree for {record.image_path}: "
            f"image {image.shape}, depth {depth.shape}, semantics {sem.shape}"
        )
    return Sample(image, depth, sem)


def load_samples(manifest: Manifest, class_count: int) -> list[Sample]:
    return [load_sample(r, class_count) for r in manifest.records]


def save_sample(out_dir, stem: str, sample: Sample) -> Record:
    """Lossless containers plus an 8-bit PPM preview; returns the record pointing at them."""
    out = Path(out_dir)
    paths = {k: out / f"{stem}_{k}.sdt" for k in ("image", "depth", "semantics")}
    write_tensor(paths["image"], sample.image.astype(np.float64))
    write_tensor(paths["depth"], sample.depth.astype(np.float64))
    sem = sample.semantics
    write_tensor(paths["semantics"], sem.astype(np.uint8 if sem.max(initial=0) < 256 else np.uint16))
    write_pnm(out / f"{stem}_preview.ppm", sample.image)
    return Record(paths["image"], paths["depth"], None, paths["semantics"])


# ---------------------------------------------------------------- parameters
def save_params(directory, params: Mapping[str, Tensor]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, t) in enumerate(sorted(params.items())):
        if "\t" in name or "\n" in name:
            raise ValueError(f"parameter name {name!r} contains a tab or newline")
        fname = f"p{i:04d}.sdt"
        write_tensor(d / fname, np.asarray(t.data, dtype=np.float64))
        lines.append(f"{name}\t{fname}")
    (d / PARAM_INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(directory) -> dict[str, Tensor]:
    d = Path(directory)
    index = d / PARAM_INDEX
    if not index.is_file():
        raise FileNotFoundError(f"no parameter index at {index}")
    params = {}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        name, sep, fname = line.partition("\t")
        if not sep:
            raise FormatError(f"{index}: line {lineno} lacks a tab separator")
        params[name] = Tensor(read_tensor(d / fname).astype(np.float64), requires_grad=True)
    return params
