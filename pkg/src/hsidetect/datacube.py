"""Hyperspectral datacube ingestion, band filtering, patching and splitting.

A cube is a (bands, rows, cols) float32 raster of non-negative radiance
intensities. Cubes are serialized in the HSIB container (custom, byte-exact
round trips) or as a headerless binary with a text sidecar. Single-band
square patches are the unit consumed by the model.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgError, DataError, FormatError, IoError

HSIB_MAGIC = b"HSIB"
HSIB_VERSION = 1
_HEADER_SIZE = 64
_FLAG_WAVELENGTHS = 0x1
_MAX_NAME_BYTES = 32  # fixed fields (28 B) + padded name must fit in the 64 B header

#: Water-absorption band indices (0-based) removed by default from 224-band
#: AVIRIS cubes: 103-107, 149-162, 219-223. Leaves 200 bands, the Indian
#: Pines geometry. Override per dataset via configuration.
DEFAULT_WATER_ABSORPTION_BANDS = frozenset(
    set(range(103, 108)) | set(range(149, 163)) | set(range(219, 224))
)


class Label(enum.Enum):
    SEEN = "seen"
    UNSEEN = "unseen"
    UNLABELED = "unlabeled"


class PatchPolicy(enum.Enum):
    NON_OVERLAP_TRUNCATE = "non_overlap_truncate"
    CENTER_CROP = "center_crop"


@dataclass
class HsiCube:
    """A (bands, rows, cols) stack of single-wavelength rasters.

    ``data`` is float32, C-contiguous, band-sequential (row-major within a
    band). Intensities are raw radiance counts: finite and non-negative.
    """

    name: str
    data: np.ndarray
    band_wavelengths_nm: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ArgError(f"cube data must be 3-D (bands, rows, cols), got {self.data.ndim}-D")
        if not np.isfinite(self.data).all():
            raise DataError(f"cube '{self.name}' contains non-finite intensities")
        if (self.data < 0).any():
            raise DataError(f"cube '{self.name}' contains negative intensities")
        if self.band_wavelengths_nm is not None:
            wl = np.ascontiguousarray(self.band_wavelengths_nm, dtype=np.float64)
            if wl.shape != (self.bands,):
                raise ArgError(
                    f"wavelength list length {wl.shape} does not match {self.bands} bands"
                )
            if not (np.diff(wl) > 0).all():
                raise DataError("band wavelengths must be strictly increasing")
            self.band_wavelengths_nm = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PatchSource:
    """Identity of a patch: originating cube, band and top-left offset."""

    cube: str
    band: int
    row: int
    col: int

    def __str__(self) -> str:
        return f"{self.cube}/b{self.band}/r{self.row}/c{self.col}"


@dataclass
class Patch:
    pixels: np.ndarray  # (size, size) float32
    source: PatchSource
    label: Label = Label.UNLABELED


@dataclass
class DatasetSplit:
    train: list[Patch]
    test: list[Patch]
    validation: list[Patch]


def _pad8(n: int) -> int:
    return (n + 7) & ~7


def save_cube(cube: HsiCube, path) -> None:
    """Write ``cube`` to ``path`` in the HSIB container.

    Layout (little-endian): magic "HSIB", version u32, bands/rows/cols u32,
    flags u32 (bit 0: wavelengths present), name length u32, UTF-8 name
    padded to an 8-byte boundary, zero padding to byte 64; then bands f64
    wavelengths when present; then the float32 payload, band-sequential.
    """
    name_bytes = cube.name.encode("utf-8")
    if len(name_bytes) > _MAX_NAME_BYTES:
        raise ArgError(f"cube name exceeds {_MAX_NAME_BYTES} UTF-8 bytes: {cube.name!r}")
    flags = _FLAG_WAVELENGTHS if cube.band_wavelengths_nm is not None else 0
    header = struct.pack(
        "<4sIIIIII", HSIB_MAGIC, HSIB_VERSION, cube.bands, cube.rows, cube.cols,
        flags, len(name_bytes),
    )
    header += name_bytes.ljust(_pad8(len(name_bytes)), b"\0")
    header = header.ljust(_HEADER_SIZE, b"\0")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            if cube.band_wavelengths_nm is not None:
                fh.write(cube.band_wavelengths_nm.astype("<f8").tobytes())
            fh.write(cube.data.astype("<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write cube to {path}: {exc}") from exc


def load_cube(path, format: str = "hsib") -> HsiCube:
    """Read a cube from ``path``.

    ``format`` is ``"hsib"`` or ``"raw"``. Raw cubes are headerless float32
    binaries with a ``<path>.hdr`` text sidecar carrying ``bands=``, ``rows=``,
    ``cols=``, ``dtype=f32`` and ``interleave=bsq`` lines.
    """
    if format == "hsib":
        return _load_hsib(path)
    if format == "raw":
        return _load_raw(path)
    raise ArgError(f"unknown cube format {format!r}")


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _validate_intensities(values: np.ndarray, origin) -> None:
    if np.isnan(values).any() or np.isinf(values).any():
        raise DataError(f"{origin}: non-finite intensity in payload")
    if (values < 0).any():
        raise DataError(f"{origin}: negative intensity in payload")


def _load_hsib(path) -> HsiCube:
    blob = _read_file(path)
    if len(blob) < _HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the 64-byte HSIB header")
    magic, version, bands, rows, cols, flags, name_len = struct.unpack_from("<4sIIIIII", blob, 0)
    if magic != HSIB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != HSIB_VERSION:
        raise FormatError(f"{path}: unsupported HSIB version {version}")
    if flags & ~_FLAG_WAVELENGTHS:
        raise FormatError(f"{path}: unknown flag bits 0x{flags:x}")
    if name_len > _MAX_NAME_BYTES:
        raise FormatError(f"{path}: name length {name_len} exceeds header capacity")
    try:
        name = blob[28:28 + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: cube name is not valid UTF-8") from exc
    offset = _HEADER_SIZE
    wavelengths = None
    if flags & _FLAG_WAVELENGTHS:
        need = bands * 8
        if len(blob) < offset + need:
            raise FormatError(f"{path}: truncated wavelength table")
        wavelengths = np.frombuffer(blob, dtype="<f8", count=bands, offset=offset).copy()
        offset += need
    expected = bands * rows * cols * 4
    if len(blob) - offset != expected:
        raise FormatError(
            f"{path}: payload holds {len(blob) - offset} bytes, "
            f"header dimensions require {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(bands, rows, cols).copy()
    _validate_intensities(data, path)
    return HsiCube(name=name, data=data, band_wavelengths_nm=wavelengths)


def _load_raw(path) -> HsiCube:
    header_path = Path(str(path) + ".hdr")
    fields: dict[str, str] = {}
    try:
        for line in header_path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{header_path}: malformed line {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    except OSError as exc:
        raise IoError(f"cannot read sidecar {header_path}: {exc}") from exc
    for key in ("bands", "rows", "cols", "dtype", "interleave"):
        if key not in fields:
            raise FormatError(f"{header_path}: missing '{key}=' line")
    if fields["dtype"] != "f32":
        raise FormatError(f"{header_path}: unsupported dtype {fields['dtype']!r}")
    if fields["interleave"] != "bsq":
        raise FormatError(f"{header_path}: unsupported interleave {fields['interleave']!r}")
    try:
        bands, rows, cols = (int(fields[k]) for k in ("bands", "rows", "cols"))
    except ValueError as exc:
        raise FormatError(f"{header_path}: non-integer dimension") from exc
    blob = _read_file(path)
    expected = bands * rows * cols * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: payload holds {len(blob)} bytes, sidecar requires {expected}")
    data = np.frombuffer(blob, dtype="<f4").reshape(bands, rows, cols).copy()
    _validate_intensities(data, path)
    return HsiCube(name=Path(path).stem, data=data)


def remove_bands(cube: HsiCube, excluded: set[int]) -> HsiCube:
    """Drop the given band indices, keeping the rest in original order.

    The wavelength list, when present, is filtered in lockstep.
    """
    excluded = set(excluded)
    for idx in excluded:
        if not 0 <= idx < cube.bands:
            raise ArgError(f"band index {idx} out of range for {cube.bands}-band cube")
    keep = [b for b in range(cube.bands) if b not in excluded]
    if not keep:
        raise ArgError("cannot exclude every band")
    wl = cube.band_wavelengths_nm
    return HsiCube(
        name=cube.name,
        data=np.ascontiguousarray(cube.data[keep]),
        band_wavelengths_nm=None if wl is None else wl[keep].copy(),
    )


def extract_patches(cube: HsiCube, size: int, policy: PatchPolicy) -> list[Patch]:
    """Cut every band into square patches of side ``size``.

    NON_OVERLAP_TRUNCATE tiles row-major and discards partial tiles,
    yielding floor(rows/size) * floor(cols/size) patches per band.
    CENTER_CROP yields exactly one centered patch per band.
    """
    if size < 1:
        raise ArgError(f"patch size must be >= 1, got {size}")
    if size > min(cube.rows, cube.cols):
        raise ArgError(
            f"patch size {size} exceeds cube spatial extent {cube.rows}x{cube.cols}"
        )
    patches: list[Patch] = []
    if policy is PatchPolicy.NON_OVERLAP_TRUNCATE:
        offsets = [
            (r * size, c * size)
            for r in range(cube.rows // size)
            for c in range(cube.cols // size)
        ]
    else:
        offsets = [((cube.rows - size) // 2, (cube.cols - size) // 2)]
    for band in range(cube.bands):
        for r0, c0 in offsets:
            patches.append(Patch(
                pixels=cube.data[band, r0:r0 + size, c0:c0 + size].copy(),
                source=PatchSource(cube.name, band, r0, c0),
            ))
    return patches


def _apportion(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder allocation of n items across three fractions."""
    raw = [n * f for f in fractions]
    base = [math.floor(r) for r in raw]
    shortfall = n - sum(base)
    order = sorted(range(3), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:shortfall]:
        base[i] += 1
    return base[0], base[1], base[2]


def split_dataset(
    seen_patches: list[Patch],
    unseen_patches: list[Patch],
    fractions: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Shuffle seen patches deterministically and split per ``fractions``.

    Validation seen-patches are labeled SEEN; all unseen patches are appended
    to validation labeled UNSEEN. Train and test carry no UNSEEN patches.
    """
    if not seen_patches:
        raise ArgError("seen patch set is empty")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgError(f"split fractions {fractions} do not sum to 1")
    if any(f < 0 for f in fractions):
        raise ArgError(f"split fractions {fractions} must be non-negative")
    n = len(seen_patches)
    n_train, n_test, _ = _apportion(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [seen_patches[i] for i in perm]
    train = [replace(p, label=Label.UNLABELED) for p in shuffled[:n_train]]
    test = [replace(p, label=Label.UNLABELED) for p in shuffled[n_train:n_train + n_test]]
    validation = [replace(p, label=Label.SEEN) for p in shuffled[n_train + n_test:]]
    validation += [replace(p, label=Label.UNSEEN) for p in unseen_patches]
    return DatasetSplit(train=train, test=test, validation=validation)
