"""Image grids, dataset indexing, tiling and the error-map file format.

Grids hold float32 arrays in HWC order (row-major, channel-interleaved).
8-bit data only exists at the PNG boundary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError, LayoutError, NotFound, SizeError

VALUE_SPACES = ("unit", "model", "nonneg")
PROVENANCES = ("real", "pseudo", "synthetic")
SPLITS = ("train", "val", "test")
LAYOUTS = ("levir", "whu", "flat")

MAP_MAGIC = b"CDRLMAP1"
_MAP_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """An H x W x C float32 grid tagged with the value space it lives in."""

    data: np.ndarray
    space: str = "unit"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise FormatError(f"expected HxWxC data, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if self.space not in VALUE_SPACES:
            raise FormatError(f"unknown value space {self.space!r}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("grid contains non-finite values")
        if arr.size:
            lo, hi = float(arr.min()), float(arr.max())
            if self.space == "unit" and (lo < 0.0 or hi > 1.0):
                raise FormatError(f"unit-space grid out of [0,1]: [{lo}, {hi}]")
            if self.space == "model" and (lo < -1.0 or hi > 1.0):
                raise FormatError(f"model-space grid out of [-1,1]: [{lo}, {hi}]")
            if self.space == "nonneg" and lo < 0.0:
                raise FormatError(f"nonneg grid has negative value {lo}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def to_space(self, target: str) -> "ImageGrid":
        """Convert between unit [0,1] and model [-1,1] space."""
        if target == self.space:
            return self
        if self.space == "unit" and target == "model":
            return ImageGrid(np.clip(self.data * 2.0 - 1.0, -1.0, 1.0), "model")
        if self.space == "model" and target == "unit":
            return ImageGrid(np.clip((self.data + 1.0) * 0.5, 0.0, 1.0), "unit")
        raise FormatError(f"no conversion from {self.space} to {target}")

    def equals(self, other: "ImageGrid") -> bool:
        return self.space == other.space and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class PairSample:
    t1: ImageGrid
    t2: ImageGrid
    mask: Optional[ImageGrid] = None
    provenance: str = "real"
    name: str = ""

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise FormatError(f"unknown provenance {self.provenance!r}")
        if self.t1.shape != self.t2.shape:
            raise FormatError(f"pair shapes differ: {self.t1.shape} vs {self.t2.shape}")
        if self.mask is not None:
            m = self.mask
            if (m.height, m.width) != (self.t1.height, self.t1.width) or m.channels != 1:
                raise FormatError("mask must be single-channel and match the pair extent")
            if not np.all((m.data == 0) | (m.data == 1)):
                raise FormatError("mask must contain only 0 and 1")


@dataclass(frozen=True, eq=False)
class ErrorMap:
    """Per-pixel nonnegative reconstruction error with cached (min, max, mean)."""

    grid: ImageGrid
    stats: tuple = field(default=None)

    def __post_init__(self):
        if self.grid.space != "nonneg" or self.grid.channels != 1:
            raise FormatError("error map must be a single-channel nonneg grid")
        if self.stats is None and self.grid.data.size:
            d = self.grid.data
            object.__setattr__(self, "stats", (float(d.min()), float(d.max()), float(d.mean(dtype=np.float64))))

    @classmethod
    def from_array(cls, values) -> "ErrorMap":
        return cls(ImageGrid(np.asarray(values, dtype=np.float32), "nonneg"))

    @property
    def values(self) -> np.ndarray:
        """H x W view of the map."""
        return self.grid.data[:, :, 0]


# -- image I/O ---------------------------------------------------------------

def _read_png_u8(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported mode {mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return arr


def load_image(path, target_space: str = "unit") -> ImageGrid:
    """Load an 8-bit PNG; grayscale is replicated to three channels."""
    arr = _read_png_u8(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    unit = ImageGrid(arr.astype(np.float32) / np.float32(255.0), "unit")
    return unit.to_space(target_space)


def load_mask(path) -> ImageGrid:
    arr = _read_png_u8(path)
    if arr.ndim == 3:
        if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
            raise FormatError(f"{path}: mask must be single-channel")
        arr = arr[..., 0]
    if not np.all((arr == 0) | (arr == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return ImageGrid((arr == 255).astype(np.float32), "unit")


def to_uint8(grid: ImageGrid) -> np.ndarray:
    unit = grid.to_space("unit") if grid.space == "model" else grid
    arr = np.clip(np.rint(unit.data * 255.0), 0, 255).astype(np.uint8)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def save_image(grid: ImageGrid, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(grid)).save(path, format="PNG")


def save_mask(mask: ImageGrid, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = (mask.data[:, :, 0] > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# -- dataset indexing --------------------------------------------------------

@dataclass(frozen=True)
class DatasetEntry:
    name: str
    t1: Path
    t2: Optional[Path] = None
    mask: Optional[Path] = None


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable listing of pair (or single-image) records for one split.

    Entries with ``t2 is None`` come from a single-temporal collection
    (only an ``A`` directory on disk).
    """

    root: Path
    split: str
    entries: tuple
    tile_size: Optional[int] = None
    provenance: str = "real"

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[DatasetEntry]:
        return iter(self.entries)

    @property
    def single_temporal(self) -> bool:
        return all(e.t2 is None for e in self.entries)

    def ordered(self, seed: int) -> list:
        """Entries in a seed-determined shuffled order."""
        perm = np.random.default_rng(seed).permutation(len(self.entries))
        return [self.entries[i] for i in perm]

    def load_pair(self, i: int, space: str = "unit") -> PairSample:
        e = self.entries[i]
        if e.t2 is None:
            raise LayoutError(f"{e.name}: single-temporal entry has no second image")
        mask = load_mask(e.mask) if e.mask is not None else None
        return PairSample(load_image(e.t1, space), load_image(e.t2, space), mask, self.provenance, e.name)


def _pngs(d: Path) -> dict:
    return {p.name: p for p in sorted(d.glob("*.png"))}


def _split_dir(root: Path, layout: str, split: str) -> Path:
    if layout in ("levir", "whu"):
        d = root / split
        if not d.is_dir():
            raise LayoutError(f"{layout} layout needs {d}")
        return d
    # flat: either root/{A,B,label} or root/<split>/{A,B,label}
    if (root / split / "A").is_dir():
        return root / split
    return root


def index_dataset(root, layout: str = "flat", split: str = "test", tile_size: Optional[int] = None) -> DatasetIndex:
    """Index the PNG pairs under ``root`` for one split.

    levir/whu expect ``root/<split>/{A,B,label}``; flat accepts either that
    or ``root/{A,B,label}`` directly. A missing ``B`` directory yields a
    single-temporal index. Filenames in A and B must match exactly. A
    ``provenance.json`` marker next to ``A`` sets the pair provenance.
    """
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown layout {layout!r}")
    if split not in SPLITS:
        raise LayoutError(f"unknown split {split!r}")
    root = Path(root)
    if not root.is_dir():
        raise NotFound(f"no dataset root at {root}")
    base = _split_dir(root, layout, split)
    a_dir, b_dir, l_dir = base / "A", base / "B", base / "label"
    if not a_dir.is_dir():
        raise LayoutError(f"missing directory {a_dir}")
    a = _pngs(a_dir)
    if not a:
        raise LayoutError(f"no PNG files in {a_dir}")
    b = _pngs(b_dir) if b_dir.is_dir() else None
    if b is not None and set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise LayoutError(f"A/B mismatch: only in A {only_a[:10]}, only in B {only_b[:10]}")
    labels = _pngs(l_dir) if l_dir.is_dir() else {}
    if labels and set(labels) != set(a):
        missing = sorted(set(a) - set(labels))
        extra = sorted(set(labels) - set(a))
        raise LayoutError(f"label mismatch: missing {missing[:10]}, unexpected {extra[:10]}")
    entries = tuple(
        DatasetEntry(name, a[name], b[name] if b is not None else None, labels.get(name))
        for name in sorted(a)
    )
    provenance = "real"
    marker = base / "provenance.json"
    if marker.is_file():
        provenance = json.loads(marker.read_text()).get("provenance", "real")
        if provenance not in PROVENANCES:
            raise LayoutError(f"{marker}: unknown provenance {provenance!r}")
    return DatasetIndex(root, split, entries, tile_size, provenance)


# -- tiling ------------------------------------------------------------------

def _anchors(extent: int, tile: int, stride: int) -> list:
    pos = list(range(0, extent - tile + 1, stride))
    if pos[-1] + tile < extent:
        pos.append(extent - tile)
    return pos


def tile_image(img: ImageGrid, tile: int, stride: int) -> list:
    """Cut ``img`` into ``tile`` x ``tile`` crops.

    Returns ``[(crop, (y, x)), ...]`` in row-major anchor order. The last
    tile along each axis is shifted inward to end at the image edge.
    A stride larger than the tile would leave uncovered gaps and is refused.
    """
    if stride < 1 or stride > tile:
        raise SizeError(f"stride must be in [1, tile={tile}], got {stride}")
    if tile < 1 or tile > min(img.height, img.width):
        raise SizeError(f"tile {tile} does not fit a {img.height}x{img.width} image")
    out = []
    for y in _anchors(img.height, tile, stride):
        for x in _anchors(img.width, tile, stride):
            out.append((ImageGrid(img.data[y:y + tile, x:x + tile], img.space), (y, x)))
    return out


def reassemble(tiles: Sequence, height: int, width: int) -> ImageGrid:
    """Inverse of :func:`tile_image`; later tiles win on overlaps."""
    first = tiles[0][0]
    canvas = np.zeros((height, width, first.channels), dtype=np.float32)
    for grid, (y, x) in tiles:
        canvas[y:y + grid.height, x:x + grid.width] = grid.data
    return ImageGrid(canvas, first.space)


# -- error map file format ---------------------------------------------------

def encode_error_map(emap: ErrorMap) -> bytes:
    values = emap.values
    h, w = values.shape
    if h == 0 or w == 0:
        raise FormatError("refusing to write an empty error map")
    return _MAP_HEADER.pack(MAP_MAGIC, h, w) + values.astype("<f4").tobytes(order="C")


def decode_error_map(blob: bytes) -> ErrorMap:
    if len(blob) < _MAP_HEADER.size:
        raise FormatError("truncated error map header")
    magic, h, w = _MAP_HEADER.unpack_from(blob)
    if magic != MAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if h == 0 or w == 0:
        raise FormatError("empty error map")
    expected = _MAP_HEADER.size + 4 * h * w
    if len(blob) != expected:
        raise FormatError(f"payload size {len(blob)} != expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=_MAP_HEADER.size).reshape(h, w)
    return ErrorMap.from_array(values.astype(np.float32))


def write_error_map(emap: ErrorMap, path) -> None:
    blob = encode_error_map(emap)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)


def read_error_map(path) -> ErrorMap:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such error map: {path}")
    return decode_error_map(path.read_bytes())
