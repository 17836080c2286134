"""Multi-band rasters, synthetic scenes, patches and the ``.satf`` format.

``.satf`` layout: one ASCII header line, newline terminated, with fields in
this fixed order::

    SATF version=1 H=<int> W=<int> C=<int> bands=<name>,<name>,...

followed by exactly ``H*W*C`` little-endian float32 values in
band-sequential order (all of band 1 row by row, then band 2, ...).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MAGIC = "SATF"
VERSION = 1
_DTYPE = np.dtype("<f4")


class RasterFormatError(ValueError):
    pass


class VersionMismatchError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


def default_band_names(c: int) -> list[str]:
    return [f"B{i}" for i in range(1, c + 1)]


class Raster:
    """Immutable H x W x C grid stored band-sequentially as a (C, H, W) float32 array."""

    __slots__ = ("_data", "band_names")

    def __init__(self, data, band_names: Optional[Sequence[str]] = None):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"raster data must be (C, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster contains non-finite values")
        names = list(band_names) if band_names is not None else default_band_names(arr.shape[0])
        if len(names) != arr.shape[0]:
            raise ValueError(f"{len(names)} band names for {arr.shape[0]} bands")
        if len(set(names)) != len(names):
            raise ValueError("band names must be unique")
        for n in names:
            if not n or any(ch in n for ch in " ,\n\t"):
                raise ValueError(f"invalid band name {n!r}")
        arr.setflags(write=False)
        self._data = arr
        self.band_names = tuple(names)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def bands(self) -> int:
        return self._data.shape[0]

    @property
    def shape(self):
        """(H, W, C)"""
        return (self.height, self.width, self.bands)

    def band(self, index: int) -> np.ndarray:
        """1-based band access."""
        if not 1 <= index <= self.bands:
            raise IndexError(f"band {index} not in 1..{self.bands}")
        return self._data[index - 1]

    def hwc(self) -> np.ndarray:
        return np.transpose(self._data, (1, 2, 0))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.band_names == other.band_names and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Raster(H={self.height}, W={self.width}, C={self.bands}, bands={list(self.band_names)})"


@dataclass
class Sample:
    image: Raster
    target: np.ndarray  # (H, W) float64
    skeleton: Optional[tuple] = None
    scalar_target: Optional[float] = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.shape != (self.image.height, self.image.width):
            raise ValueError(
                f"target shape {self.target.shape} does not match image {self.image.height}x{self.image.width}"
            )


# -- synthesis ----------------------------------------------------------------


def box_blur(a: np.ndarray, passes: int) -> np.ndarray:
    """``passes`` applications of a 3x3 mean filter with reflective boundaries."""
    out = np.asarray(a, dtype=np.float64)
    for _ in range(passes):
        p = np.pad(out, 1, mode="symmetric")
        h, w = out.shape
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += p[dy:dy + h, dx:dx + w]
        out = acc / 9.0
    return out


def _band_ranges(band_range, c):
    arr = np.asarray(band_range, dtype=np.float64)
    if arr.shape == (2,):
        arr = np.tile(arr, (c, 1))
    if arr.shape != (c, 2):
        raise ValueError(f"band_range must be [lo, hi] or {c} such pairs")
    if np.any(arr[:, 0] >= arr[:, 1]):
        raise ValueError("band_range requires lo < hi")
    return arr


def synth_scene(
    seed: int,
    H: int,
    W: int,
    C: int,
    smoothness: int = 2,
    band_range=(0.0, 1.0),
    band_names: Optional[Sequence[str]] = None,
) -> Raster:
    """Smoothed white noise per band, rescaled affinely onto ``band_range``.

    ``band_range`` is either one ``[lo, hi]`` pair or one pair per band.
    """
    if H < 8 or W < 8:
        raise ValueError("synth_scene requires H, W >= 8")
    if not 1 <= C <= 8:
        raise ValueError("synth_scene requires 1 <= C <= 8")
    if smoothness < 0:
        raise ValueError("smoothness must be >= 0")
    ranges = _band_ranges(band_range, C)
    rng = np.random.default_rng(seed)
    data = np.empty((C, H, W))
    for c in range(C):
        noise = box_blur(rng.standard_normal((H, W)), smoothness)
        lo, hi = ranges[c]
        span = noise.max() - noise.min()
        unit = (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)
        band = lo + unit * (hi - lo)
        # pin extremes exactly after rounding to float32
        band[unit == 0.0] = lo
        band[unit == 1.0] = hi
        data[c] = band
    return Raster(data, band_names)


def mean_abs_gradient(r: Raster) -> float:
    d = r.data.astype(np.float64)
    return float(np.mean(np.abs(np.diff(d, axis=1))) + np.mean(np.abs(np.diff(d, axis=2))))


# -- patches ------------------------------------------------------------------


def extract_patches(r: Raster, patch: int) -> list[Raster]:
    """Non-overlapping ``patch`` x ``patch`` tiles in row-major order."""
    if patch <= 0 or r.height % patch or r.width % patch:
        raise ValueError(f"patch size {patch} does not divide {r.height}x{r.width}")
    out = []
    for i in range(0, r.height, patch):
        for j in range(0, r.width, patch):
            out.append(Raster(r.data[:, i:i + patch, j:j + patch], r.band_names))
    return out


def assemble_patches(patches: Sequence[Raster], rows: int, cols: int) -> Raster:
    if len(patches) != rows * cols:
        raise ValueError("patch count does not match grid")
    grid = [np.concatenate([p.data for p in patches[r * cols:(r + 1) * cols]], axis=2) for r in range(rows)]
    return Raster(np.concatenate(grid, axis=1), patches[0].band_names)


# -- file format --------------------------------------------------------------


def _header(r: Raster) -> bytes:
    return (
        f"{MAGIC} version={VERSION} H={r.height} W={r.width} C={r.bands} "
        f"bands={','.join(r.band_names)}\n"
    ).encode("ascii")


def to_bytes(r: Raster) -> bytes:
    return _header(r) + r.data.astype(_DTYPE, copy=False).tobytes(order="C")


def from_bytes(blob: bytes) -> Raster:
    nl = blob.find(b"\n")
    if nl < 0:
        raise RasterFormatError("missing header line")
    try:
        fields = blob[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError as exc:
        raise VersionMismatchError("header is not a SATF header") from exc
    if not fields or fields[0] != MAGIC:
        raise VersionMismatchError(f"bad magic {fields[0]!r}, expected {MAGIC!r}")
    keys = ["version", "H", "W", "C", "bands"]
    if len(fields) != 1 + len(keys):
        raise RasterFormatError("malformed header")
    values = {}
    for key, item in zip(keys, fields[1:]):
        k, sep, v = item.partition("=")
        if k != key or not sep:
            raise RasterFormatError(f"expected header field {key!r}, found {item!r}")
        values[k] = v
    if values["version"] != str(VERSION):
        raise VersionMismatchError(f"unsupported version {values['version']}, expected {VERSION}")
    try:
        h, w, c = int(values["H"]), int(values["W"]), int(values["C"])
    except ValueError as exc:
        raise RasterFormatError("non-integer dimensions") from exc
    names = values["bands"].split(",")
    expected = h * w * c * _DTYPE.itemsize
    payload = blob[nl + 1:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise RasterFormatError(f"payload has {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype=_DTYPE).reshape(c, h, w)
    return Raster(data, names)


def save(r: Raster, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(r))


def load(path) -> Raster:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# -- datasets -----------------------------------------------------------------


def make_dataset(
    seed: int,
    n_samples: int,
    task: str,
    size: int = 64,
    smoothness: int = 2,
    band_range=None,
) -> list[Sample]:
    """Synthetic scenes with targets from the ``task`` oracle.

    Sample ``i`` is drawn from the generator stream ``(seed, i)``, so any
    prefix of a larger dataset equals the smaller dataset.
    """
    from .expr import to_tokens
    from .indices import compute_index, get_index

    spec = get_index(task)
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    ranges = spec.band_ranges if band_range is None else band_range
    skeleton = to_tokens(spec.reference_expr)
    samples = []
    for i in range(n_samples):
        image = synth_scene(
            [seed, i], size, size, len(spec.band_names), smoothness, ranges, spec.band_names
        )
        target = compute_index(spec.name, image)
        samples.append(Sample(image, target, skeleton, float(target.mean())))
    return samples


MANIFEST = "manifest.json"


def _samples_from_images(images, task):
    from .expr import to_tokens
    from .indices import compute_index, get_index

    skeleton = to_tokens(get_index(task).reference_expr)
    out = []
    for image in images:
        target = compute_index(task, image)
        out.append(Sample(image, target, skeleton, float(target.mean())))
    return out


def save_dataset(samples: Sequence[Sample], out_dir, task: str, seed: int, size: int) -> dict:
    """Write ``sample_XXXX.satf`` files plus ``manifest.json``; returns the manifest."""
    import json

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        name = f"sample_{i:04d}.satf"
        save(s.image, os.path.join(out_dir, name))
        files.append(name)
    manifest = {"task": task, "seed": seed, "n": len(samples), "size": size, "files": files}
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir, task: Optional[str] = None):
    """Read a dataset directory; targets are recomputed from the manifest task.

    Returns ``(manifest, samples)``. ``task`` overrides the manifest task.
    """
    import json

    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("task", "files"):
        if key not in manifest:
            raise RasterFormatError(f"manifest lacks {key!r}")
    images = [load(os.path.join(data_dir, f)) for f in manifest["files"]]
    return manifest, _samples_from_images(images, task or manifest["task"])
