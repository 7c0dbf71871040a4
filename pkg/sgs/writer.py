"""
SGS Writer - Serializes volumes, images and checkpoints to SGS containers.

Every container is assembled in one pass:
  1. Serialize the kind header and payload to bytes
  2. Hash the payload (SHA-256)
  3. Assemble final output: preamble + kind header + payload + checksum

Writes are atomic (temp file + fsync + rename), so a crash never leaves a
partially written container behind.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from sgs.errors import ConfigurationError
from sgs.formats import (
    CONFIG_HASH_BYTES, FORMAT_VERSION, IMAGE_HEADER, MAGIC_CHECKPOINT, MAGIC_IMAGE,
    MAGIC_LABELS, MAGIC_VOLUME, MAX_ARRAY_NAME_LENGTH, MAX_ARRAY_NDIM, MAX_ARRAYS,
    MAX_CLASSES, PREAMBLE, VOLUME_HEADER,
)

if TYPE_CHECKING:
    from sgs.core import GridSpec, LabelVolume, SemanticVolume
    from sgs.projection import SemanticDepthImage

_NO_HASH = bytes(CONFIG_HASH_BYTES)


class ContainerWriter:

    @staticmethod
    def _frame(magic: bytes, config_hash: bytes | None, header: bytes, payload: bytes) -> bytes:
        config_hash = config_hash or _NO_HASH
        if len(config_hash) != CONFIG_HASH_BYTES:
            raise ConfigurationError(f"Config hash must be {CONFIG_HASH_BYTES} bytes, got {len(config_hash)}")
        out = io.BytesIO()
        out.write(PREAMBLE.pack(magic, FORMAT_VERSION, config_hash))
        out.write(header)
        out.write(payload)
        out.write(hashlib.sha256(payload).digest())
        return out.getvalue()

    @staticmethod
    def _grid_header(grid: GridSpec, num_classes: int) -> bytes:
        if num_classes > MAX_CLASSES:
            raise ConfigurationError(f"At most {MAX_CLASSES} classes fit in a container, got {num_classes}")
        return VOLUME_HEADER.pack(grid.w, grid.h, grid.d, num_classes, grid.gamma)

    @staticmethod
    def serialize_volume(volume: SemanticVolume, config_hash: bytes | None = None) -> bytes:
        """Probabilities as f32, x-fastest (Fortran) order over w x h x d x (C+1)."""
        header = ContainerWriter._grid_header(volume.grid, volume.labels.num_classes)
        payload = np.asarray(volume.probs, dtype="<f4").tobytes(order="F")
        return ContainerWriter._frame(MAGIC_VOLUME, config_hash, header, payload)

    @staticmethod
    def serialize_labels(labels: LabelVolume, config_hash: bytes | None = None) -> bytes:
        header = ContainerWriter._grid_header(labels.grid, labels.num_classes)
        payload = np.asarray(labels.ids, dtype=np.uint8).tobytes(order="F")
        return ContainerWriter._frame(MAGIC_LABELS, config_hash, header, payload)

    @staticmethod
    def serialize_image(image: SemanticDepthImage, config_hash: bytes | None = None) -> bytes:
        cam = image.camera
        num_classes = image.num_channels - 1
        if num_classes > MAX_CLASSES:
            raise ConfigurationError(f"At most {MAX_CLASSES} classes fit in a container, got {num_classes}")
        pose = np.concatenate([cam.rotation.ravel(), cam.translation])
        header = IMAGE_HEADER.pack(
            cam.width, cam.height, num_classes, cam.far_depth,
            cam.fx, cam.fy, cam.cx, cam.cy, *pose.tolist(),
        )
        planes = np.concatenate([image.depth[None], np.moveaxis(image.semantics, -1, 0)], axis=0)
        payload = np.ascontiguousarray(planes, dtype="<f4").tobytes()
        return ContainerWriter._frame(MAGIC_IMAGE, config_hash, header, payload)

    @staticmethod
    def serialize_checkpoint(
        arrays: dict[str, np.ndarray],
        meta: dict,
        config_hash: bytes | None = None,
    ) -> bytes:
        """Named f64 arrays plus a JSON document (config, counters, rng state)."""
        if len(arrays) > MAX_ARRAYS:
            raise ConfigurationError(f"Maximum array count exceeded: {MAX_ARRAYS}")
        out = io.BytesIO()
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        out.write(struct.pack("<I", len(meta_bytes)))
        out.write(meta_bytes)
        out.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            array = np.asarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            if not encoded or len(encoded) > MAX_ARRAY_NAME_LENGTH:
                raise ConfigurationError(f"Array name length must be 1..{MAX_ARRAY_NAME_LENGTH}: {name!r}")
            if array.ndim > MAX_ARRAY_NDIM:
                raise ConfigurationError(f"Array {name!r} has {array.ndim} dims (max {MAX_ARRAY_NDIM})")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<B", array.ndim))
            out.write(struct.pack(f"<{array.ndim}I", *array.shape))
            out.write(np.ascontiguousarray(array).tobytes())
        return ContainerWriter._frame(MAGIC_CHECKPOINT, config_hash, b"", out.getvalue())

    @staticmethod
    def write_bytes(data: bytes, path: str | Path, mode: int = 0o644) -> int:
        """Write bytes atomically. Returns bytes written."""
        path = Path(path)
        dir_name = path.resolve().parent
        dir_name.mkdir(parents=True, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=dir_name, suffix=".sgs.tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.chmod(tmp_path, mode)
            os.replace(tmp_path, path)
        except Exception:
            try:
                os.unlink(tmp_path)
            except OSError:
                pass
            raise
        return len(data)

    @classmethod
    def write_volume(cls, volume: SemanticVolume, path: str | Path, config_hash: bytes | None = None) -> int:
        return cls.write_bytes(cls.serialize_volume(volume, config_hash), path)

    @classmethod
    def write_labels(cls, labels: LabelVolume, path: str | Path, config_hash: bytes | None = None) -> int:
        return cls.write_bytes(cls.serialize_labels(labels, config_hash), path)

    @classmethod
    def write_image(cls, image: SemanticDepthImage, path: str | Path, config_hash: bytes | None = None) -> int:
        return cls.write_bytes(cls.serialize_image(image, config_hash), path)

    @classmethod
    def write_checkpoint(
        cls,
        arrays: dict[str, np.ndarray],
        meta: dict,
        path: str | Path,
        config_hash: bytes | None = None,
    ) -> int:
        return cls.write_bytes(cls.serialize_checkpoint(arrays, meta, config_hash), path)
