"""
Volume and region-mask containers plus their binary formats.

OBV1: magic, 3 x u32 dims, 3 x f32 spacing (mm), then dims-product f32 intensities.
OBM1: same header, then dims-product u16 region labels (0 = background).
All fields little-endian, voxels in row-major (x, y, z) order.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from services.errors import FormatError, SchemaError

VOLUME_MAGIC = b'OBV1'
MASK_MAGIC = b'OBM1'
_HEADER = struct.Struct('<4s3I3f')


@dataclass(frozen=True)
class Volume3D:
    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise SchemaError(f"volume must be 3-D with positive dims, got shape {arr.shape}")
        object.__setattr__(self, 'intensities', arr)
        object.__setattr__(self, 'spacing', tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.intensities.shape


@dataclass(frozen=True)
class RegionMask:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise SchemaError(f"region mask must be 3-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise SchemaError("region labels must fit in u16")
        object.__setattr__(self, 'labels', arr.astype(np.uint16))
        object.__setattr__(self, 'spacing', tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.labels.shape

    def check_matches(self, volume):
        if self.dims != volume.dims:
            raise SchemaError(f"mask dims {self.dims} do not match volume dims {volume.dims}")

    def region_labels(self):
        return [int(v) for v in np.unique(self.labels) if v != 0]


def _pack(magic, dims, spacing, payload):
    return _HEADER.pack(magic, *dims, *spacing) + payload


def _unpack(raw, magic, dtype, path):
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    found, x, y, z, sx, sy, sz = _HEADER.unpack_from(raw)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    count = x * y * z
    body = raw[_HEADER.size:]
    if len(body) != count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: payload size does not match dims {x}x{y}x{z}")
    data = np.frombuffer(body, dtype=dtype).reshape((x, y, z))
    return data, (sx, sy, sz)


def write_volume(path, volume):
    payload = volume.intensities.astype('<f4').tobytes(order='C')
    Path(path).write_bytes(_pack(VOLUME_MAGIC, volume.dims, volume.spacing, payload))


def read_volume(path):
    data, spacing = _unpack(Path(path).read_bytes(), VOLUME_MAGIC, '<f4', path)
    return Volume3D(data.astype(np.float64), spacing)


def write_mask(path, mask):
    payload = mask.labels.astype('<u2').tobytes(order='C')
    Path(path).write_bytes(_pack(MASK_MAGIC, mask.dims, mask.spacing, payload))


def read_mask(path):
    data, spacing = _unpack(Path(path).read_bytes(), MASK_MAGIC, '<u2', path)
    return RegionMask(data.copy(), spacing)
