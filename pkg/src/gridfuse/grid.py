"""Gridded data model and the GRD1 binary container.

A :class:`GridField` is a 4-axis ``[time][lat][lon][feature]`` float32 array
with coordinate axes, feature names, and a boolean land mask. Cells outside
the mask hold NaN in every time step and feature; nothing downstream is
allowed to consume them.

GRD1 layout (all integers little-endian)::

    magic    b"GRD1"
    u16      version (1)
    u16      feature count F
    u32      T, LAT, LON
    f64[T]   time axis
    f64[LAT] lat axis
    f64[LON] lon axis
    F x (u16 name length, UTF-8 bytes)
    mask     packed bits, row-major with lat outer, MSB first, zero padded
             to a byte boundary
    f32      payload, row-major [time][lat][lon][feature]
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field as dc_field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import AlignmentError, FormatError, TruncationError, ValidationError

MAGIC = b"GRD1"
VERSION = 1
ROLES = ("msp", "predictor", "label", "output", "probability")

_HEAD = struct.Struct("<4sHHIII")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridField:
    data: np.ndarray
    time_axis: np.ndarray
    lat_axis: np.ndarray
    lon_axis: np.ndarray
    feature_names: tuple[str, ...]
    mask: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValidationError(f"data must have 4 axes [time][lat][lon][feature], got {data.ndim}")
        mask = self.mask
        if mask is None:
            mask = np.ones(data.shape[1:3], dtype=bool)
        mask = np.array(mask, dtype=bool)
        if mask.shape == data.shape[1:3]:
            data[:, ~mask, :] = np.nan
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "mask", _frozen(mask))
        for name in ("time_axis", "lat_axis", "lon_axis"):
            object.__setattr__(self, name, _frozen(np.array(getattr(self, name), dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "feature_names", tuple(str(f) for f in self.feature_names))
        self.validate()

    def validate(self) -> None:
        """Raise :class:`ValidationError` naming the first broken invariant."""
        T, H, W, F = self.data.shape
        if (len(self.time_axis), len(self.lat_axis), len(self.lon_axis), len(self.feature_names)) != (T, H, W, F):
            raise ValidationError("extent invariant: data extents must equal the four axis lengths")
        if self.mask.shape != (H, W):
            raise ValidationError(f"mask invariant: mask shape {self.mask.shape} != {(H, W)}")
        if any(not f for f in self.feature_names) or len(set(self.feature_names)) != F:
            raise ValidationError("feature invariant: feature names must be nonempty and distinct")
        for name, ax in (("time_axis", self.time_axis), ("lat_axis", self.lat_axis), ("lon_axis", self.lon_axis)):
            if not np.all(np.isfinite(ax)):
                raise ValidationError(f"axis invariant: {name} contains non-finite values")
            if len(ax) > 1 and not np.all(np.diff(ax) > 0):
                raise ValidationError(f"monotonic invariant: {name} is not strictly increasing")
        if not np.all(np.isnan(self.data[:, ~self.mask, :])):
            raise ValidationError("sentinel invariant: masked cells must hold NaN")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}; have {list(self.feature_names)}") from None

    def feature(self, name: str) -> np.ndarray:
        """Read-only ``[time][lat][lon]`` view of one feature."""
        return self.data[..., self.feature_index(name)]

    def same_grid(self, other: "GridField") -> bool:
        return (
            np.array_equal(self.lat_axis, other.lat_axis)
            and np.array_equal(self.lon_axis, other.lon_axis)
            and np.array_equal(self.mask, other.mask)
        )

    def replace(self, data=None, time_axis=None, feature_names=None, mask=None, lat_axis=None, lon_axis=None):
        return GridField(
            data=self.data if data is None else data,
            time_axis=self.time_axis if time_axis is None else time_axis,
            lat_axis=self.lat_axis if lat_axis is None else lat_axis,
            lon_axis=self.lon_axis if lon_axis is None else lon_axis,
            feature_names=self.feature_names if feature_names is None else feature_names,
            mask=self.mask if mask is None else mask,
        )

    def isel_time(self, sl: slice) -> "GridField":
        return self.replace(data=self.data[sl], time_axis=self.time_axis[sl])

    def equals(self, other: "GridField") -> bool:
        """Bitwise equality, NaN payloads included."""
        return (
            self.feature_names == other.feature_names
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.time_axis.tobytes() == other.time_axis.tobytes()
            and self.lat_axis.tobytes() == other.lat_axis.tobytes()
            and self.lon_axis.tobytes() == other.lon_axis.tobytes()
            and np.array_equal(self.mask, other.mask)
        )


# ---------------------------------------------------------------- GRD1 I/O


def grd1_bytes(field: GridField) -> bytes:
    field.validate()
    T, H, W, F = field.data.shape
    parts = [
        _HEAD.pack(MAGIC, VERSION, F, T, H, W),
        field.time_axis.astype("<f8").tobytes(),
        field.lat_axis.astype("<f8").tobytes(),
        field.lon_axis.astype("<f8").tobytes(),
    ]
    for name in field.feature_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"feature name too long: {name[:20]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.packbits(field.mask.reshape(-1)).tobytes())
    parts.append(np.ascontiguousarray(field.data, dtype="<f4").tobytes())
    return b"".join(parts)


def write_grd1(field: GridField, destination: str | os.PathLike | BinaryIO) -> int:
    """Serialise ``field`` to a path or binary sink; returns the byte count."""
    payload = grd1_bytes(field)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            return _write_all(fh, payload)
    return _write_all(destination, payload)


def _write_all(fh: BinaryIO, payload: bytes) -> int:
    offset = 0
    chunk = 1 << 20
    view = memoryview(payload)
    while offset < len(payload):
        try:
            n = fh.write(view[offset : offset + chunk])
        except OSError as exc:
            raise OSError(f"GRD1 write failed at byte offset {offset}: {exc}") from exc
        offset += chunk if n is None else n
    return len(payload)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        avail = len(self.buf) - self.pos
        if avail < n:
            raise TruncationError(what, n, avail)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def grd1_from_bytes(buf: bytes) -> GridField:
    cur = _Cursor(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    magic, version, F, T, H, W = _HEAD.unpack(cur.take(_HEAD.size, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported GRD1 version {version}")
    time_axis = np.frombuffer(cur.take(8 * T, "time axis"), dtype="<f8")
    lat_axis = np.frombuffer(cur.take(8 * H, "lat axis"), dtype="<f8")
    lon_axis = np.frombuffer(cur.take(8 * W, "lon axis"), dtype="<f8")
    names = []
    for _ in range(F):
        (n,) = struct.unpack("<H", cur.take(2, "feature name length"))
        try:
            names.append(cur.take(n, "feature name").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"feature name is not UTF-8: {exc}") from exc
    nbits = H * W
    mask = np.unpackbits(np.frombuffer(cur.take((nbits + 7) // 8, "mask"), dtype=np.uint8))[:nbits]
    mask = mask.astype(bool).reshape(H, W)
    payload = np.frombuffer(cur.take(4 * T * H * W * F, "payload"), dtype="<f4").reshape(T, H, W, F)
    if cur.pos != len(buf):
        raise FormatError(f"{len(buf) - cur.pos} trailing bytes after payload")
    if not np.all(np.isnan(payload[:, ~mask, :])):
        raise ValidationError("sentinel invariant: masked cells in payload are not NaN")
    return GridField(payload.copy(), time_axis, lat_axis, lon_axis, tuple(names), mask)


def read_grd1(source: str | os.PathLike | BinaryIO | bytes) -> GridField:
    """Parse a GRD1 stream. Nothing is returned unless the whole stream is valid."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return grd1_from_bytes(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return grd1_from_bytes(fh.read())
    return grd1_from_bytes(source.read())


# ---------------------------------------------------------------- aggregation


def ensemble_mean(fields: Sequence[GridField], feature: str, name: str | None = None) -> GridField:
    """Per-cell arithmetic mean of ``feature`` across ``fields``.

    Values are sorted along the member axis before summation so the result is
    exactly invariant to the order of ``fields``.
    """
    if not fields:
        raise ValueError("ensemble_mean needs at least one field")
    ref = fields[0]
    for f in fields[1:]:
        if not ref.same_grid(f) or f.data.shape[0] != ref.data.shape[0] or not np.array_equal(f.time_axis, ref.time_axis):
            raise AlignmentError("ensemble members do not share axes and mask")
    stack = np.stack([f.feature(feature).astype(np.float64) for f in fields])
    mean = np.sort(stack, axis=0).sum(axis=0) / len(fields)
    return ref.replace(data=mean[..., None], feature_names=(name or feature,))


# ---------------------------------------------------------------- catalogs


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    field: GridField
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}; expected one of {ROLES}")


class FieldCatalog:
    """Named fields on one shared grid, each tagged with a role."""

    def __init__(self, entries: Iterable[CatalogEntry] = ()):
        self._entries: dict[str, CatalogEntry] = {}
        for e in entries:
            self.add(e.name, e.field, e.role)

    def add(self, name: str, field: GridField, role: str) -> None:
        if name in self._entries:
            raise ValidationError(f"duplicate catalog entry {name!r}")
        if self._entries:
            ref = next(iter(self._entries.values())).field
            if not ref.same_grid(field):
                raise AlignmentError(f"entry {name!r} does not share the catalog's lat/lon axes and mask")
            if not np.array_equal(ref.time_axis, field.time_axis):
                raise AlignmentError(f"entry {name!r} has a different time axis")
        self._entries[name] = CatalogEntry(name, field, role)

    def __getitem__(self, name: str) -> GridField:
        return self._entries[name].field

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, role: str | None = None) -> list[str]:
        return [e.name for e in self._entries.values() if role is None or e.role == role]

    def role(self, name: str) -> str:
        return self._entries[name].role

    @property
    def mask(self) -> np.ndarray:
        return next(iter(self._entries.values())).field.mask

    @property
    def template(self) -> GridField:
        return next(iter(self._entries.values())).field

    def label_name(self) -> str:
        labels = self.names("label")
        if len(labels) != 1:
            raise ValidationError(f"a training catalog needs exactly one label entry, found {len(labels)}")
        return labels[0]

    def channel_names(self, names: Sequence[str]) -> list[str]:
        out = []
        for n in names:
            f = self[n]
            out.extend([n] if f.data.shape[3] == 1 else [f"{n}:{fn}" for fn in f.feature_names])
        return out

    def stack(self, names: Sequence[str], dtype=np.float64) -> np.ndarray:
        """Concatenate the features of ``names`` into ``[T, LAT, LON, C]``."""
        return np.concatenate([self[n].data.astype(dtype) for n in names], axis=-1)

    def with_entry(self, name: str, field: GridField, role: str) -> "FieldCatalog":
        out = FieldCatalog(self._entries.values())
        out.add(name, field, role)
        return out

    def subset(self, names: Sequence[str]) -> "FieldCatalog":
        return FieldCatalog(self._entries[n] for n in names)


def to_bytes_io(field: GridField) -> io.BytesIO:
    buf = io.BytesIO()
    write_grd1(field, buf)
    buf.seek(0)
    return buf
