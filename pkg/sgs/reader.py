"""
SGS Reader - Validating parser for SGS containers.

Security features:
  - Magic check in the first MAX_MAGIC_SCAN_BYTES bytes (instant identification)
  - File size limits (prevents OOM from crafted files)
  - Unknown versions rejected instead of guessed at
  - Header bounds validated against the actual payload length
  - SHA-256 payload checksum verified before any array is decoded (fail-closed)
"""

from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgs.core import GridSpec, LabelSpace, LabelVolume, SemanticVolume
from sgs.errors import FormatError
from sgs.formats import (
    CHECKSUM_BYTES, IMAGE_HEADER, MAGIC_CHECKPOINT, MAGIC_IMAGE, MAGIC_LABELS,
    MAGIC_VOLUME, MAGICS, MAX_ARRAY_NAME_LENGTH, MAX_ARRAY_NDIM, MAX_ARRAYS,
    MAX_FILE_SIZE, MAX_MAGIC_SCAN_BYTES, PREAMBLE, SUPPORTED_VERSIONS, VOLUME_HEADER,
)
from sgs.projection import Camera, SemanticDepthImage

_HEADERS = {
    MAGIC_VOLUME: VOLUME_HEADER,
    MAGIC_LABELS: VOLUME_HEADER,
    MAGIC_IMAGE: IMAGE_HEADER,
    MAGIC_CHECKPOINT: None,
}


@dataclass
class ContainerInfo:
    """Header-level view of a container, as shown by `sgs inspect`."""

    magic: bytes
    kind: str
    version: int
    config_hash: bytes
    header: tuple = ()
    payload_size: int = 0
    checksum_ok: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "magic": self.magic.decode("ascii"),
            "kind": self.kind,
            "version": self.version,
            "config_hash": self.config_hash.hex(),
            "header": list(self.header),
            "payload_size": self.payload_size,
            "checksum_ok": self.checksum_ok,
            **self.extra,
        }


class ContainerReader:
    """
    Container reader.

    Usage:
        volume, config_hash = ContainerReader.read_volume("scene.sgsv")
        info = ContainerReader.inspect("scene.sgsv")
    """

    @staticmethod
    def identify(path: str | Path) -> str | None:
        """Kind name of a container from its magic bytes, or None."""
        with open(path, "rb") as f:
            head = f.read(MAX_MAGIC_SCAN_BYTES)
        return MAGICS.get(head)

    @staticmethod
    def _load(path: str | Path, max_size: int) -> bytes:
        path = Path(path)
        size = path.stat().st_size
        if size > max_size:
            raise FormatError(
                f"File size {size} exceeds maximum {max_size} bytes. Pass max_size= to override."
            )
        return path.read_bytes()

    @staticmethod
    def _split(data: bytes, expected: bytes | None = None, verify: bool = True) -> tuple[ContainerInfo, bytes]:
        if len(data) < PREAMBLE.size + CHECKSUM_BYTES:
            raise FormatError(f"Truncated container: {len(data)} bytes")
        magic, version, config_hash = PREAMBLE.unpack_from(data, 0)
        if magic not in MAGICS:
            raise FormatError(f"Unknown magic bytes {magic!r}")
        if expected is not None and magic != expected:
            raise FormatError(f"Expected a {MAGICS[expected]} container, found a {MAGICS[magic]}")
        if version not in SUPPORTED_VERSIONS:
            raise FormatError(
                f"Unsupported container version: {version}. "
                f"Supported: {', '.join(str(v) for v in sorted(SUPPORTED_VERSIONS))}"
            )
        header_struct = _HEADERS[magic]
        offset = PREAMBLE.size
        header: tuple = ()
        if header_struct is not None:
            if len(data) < offset + header_struct.size + CHECKSUM_BYTES:
                raise FormatError("Truncated container header")
            header = header_struct.unpack_from(data, offset)
            offset += header_struct.size
        payload = data[offset:-CHECKSUM_BYTES]
        stored = data[-CHECKSUM_BYTES:]
        ok = hmac.compare_digest(hashlib.sha256(payload).digest(), stored)
        if verify and not ok:
            raise FormatError("Checksum mismatch: container is corrupted")
        info = ContainerInfo(magic, MAGICS[magic], version, config_hash, header, len(payload), ok)
        return info, payload

    # -------------------------------------------------------------------------
    # Volumes
    # -------------------------------------------------------------------------

    @staticmethod
    def _grid(header: tuple) -> tuple[GridSpec, int]:
        w, h, d, num_classes, gamma = header
        try:
            return GridSpec(w, h, d, float(gamma)), num_classes
        except ValueError as e:
            raise FormatError(f"Invalid grid header: {e}") from e

    @classmethod
    def parse_volume(
        cls,
        data: bytes,
        labels: LabelSpace | None = None,
    ) -> tuple[SemanticVolume, bytes]:
        info, payload = cls._split(data, MAGIC_VOLUME)
        grid, num_classes = cls._grid(info.header)
        shape = (*grid.shape, num_classes + 1)
        if len(payload) != 4 * int(np.prod(shape)):
            raise FormatError(f"Payload size {len(payload)} does not match header shape {shape}")
        if labels is None:
            labels = LabelSpace(tuple(f"class{i}" for i in range(num_classes)))
        elif labels.num_classes != num_classes:
            raise FormatError(f"Container has {num_classes} classes, expected {labels.num_classes}")
        probs = np.frombuffer(payload, dtype="<f4").reshape(shape, order="F").astype(np.float64)
        return SemanticVolume(grid, labels, probs), info.config_hash

    @classmethod
    def read_volume(
        cls,
        path: str | Path,
        labels: LabelSpace | None = None,
        max_size: int = MAX_FILE_SIZE,
    ) -> tuple[SemanticVolume, bytes]:
        return cls.parse_volume(cls._load(path, max_size), labels)

    @classmethod
    def parse_labels(cls, data: bytes) -> tuple[LabelVolume, bytes]:
        info, payload = cls._split(data, MAGIC_LABELS)
        grid, num_classes = cls._grid(info.header)
        if len(payload) != grid.num_voxels:
            raise FormatError(f"Payload size {len(payload)} does not match grid {grid.shape}")
        ids = np.frombuffer(payload, dtype=np.uint8).reshape(grid.shape, order="F")
        try:
            return LabelVolume(grid, ids, num_classes), info.config_hash
        except ValueError as e:
            raise FormatError(str(e)) from e

    @classmethod
    def read_labels(cls, path: str | Path, max_size: int = MAX_FILE_SIZE) -> tuple[LabelVolume, bytes]:
        return cls.parse_labels(cls._load(path, max_size))

    # -------------------------------------------------------------------------
    # Images
    # -------------------------------------------------------------------------

    @classmethod
    def parse_image(cls, data: bytes) -> tuple[SemanticDepthImage, bytes]:
        info, payload = cls._split(data, MAGIC_IMAGE)
        width, height, num_classes, far, fx, fy, cx, cy, *pose = info.header
        planes = num_classes + 2
        if len(payload) != 4 * planes * width * height:
            raise FormatError(f"Payload size {len(payload)} does not match a {width}x{height} image")
        pose = np.asarray(pose, dtype=np.float64)
        try:
            camera = Camera(fx, fy, cx, cy, width, height, pose[:9].reshape(3, 3), pose[9:], float(far))
        except ValueError as e:
            raise FormatError(f"Invalid camera header: {e}") from e
        stack = np.frombuffer(payload, dtype="<f4").reshape(planes, height, width).astype(np.float64)
        image = SemanticDepthImage(stack[0], np.moveaxis(stack[1:], 0, -1), camera)
        return image, info.config_hash

    @classmethod
    def read_image(cls, path: str | Path, max_size: int = MAX_FILE_SIZE) -> tuple[SemanticDepthImage, bytes]:
        return cls.parse_image(cls._load(path, max_size))

    # -------------------------------------------------------------------------
    # Checkpoints
    # -------------------------------------------------------------------------

    @classmethod
    def parse_checkpoint(cls, data: bytes) -> tuple[dict[str, np.ndarray], dict, bytes]:
        info, payload = cls._split(data, MAGIC_CHECKPOINT)
        view = memoryview(payload)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise FormatError("Checkpoint payload ends mid-record")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        (meta_len,) = struct.unpack("<I", take(4))
        try:
            meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Checkpoint metadata is not valid JSON: {e}") from e
        (count,) = struct.unpack("<I", take(4))
        if count > MAX_ARRAYS:
            raise FormatError(f"Maximum array count exceeded: {count} > {MAX_ARRAYS}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            if name_len == 0 or name_len > MAX_ARRAY_NAME_LENGTH:
                raise FormatError(f"Array name length out of bounds: {name_len}")
            name = bytes(take(name_len)).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            if ndim > MAX_ARRAY_NDIM:
                raise FormatError(f"Array {name!r} has {ndim} dims (max {MAX_ARRAY_NDIM})")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        if pos != len(view):
            raise FormatError(f"{len(view) - pos} trailing bytes after the last checkpoint array")
        return arrays, meta, info.config_hash

    @classmethod
    def read_checkpoint(
        cls,
        path: str | Path,
        max_size: int = MAX_FILE_SIZE,
    ) -> tuple[dict[str, np.ndarray], dict, bytes]:
        return cls.parse_checkpoint(cls._load(path, max_size))

    # -------------------------------------------------------------------------
    # Inspection
    # -------------------------------------------------------------------------

    @classmethod
    def inspect(cls, path: str | Path, max_size: int = MAX_FILE_SIZE) -> ContainerInfo:
        """Header summary; never raises on a checksum mismatch, reports it instead."""
        info, payload = cls._split(cls._load(path, max_size), verify=False)
        if info.magic in (MAGIC_VOLUME, MAGIC_LABELS):
            w, h, d, num_classes, gamma = info.header
            info.extra = {"grid": [w, h, d], "classes": num_classes, "gamma": gamma}
        elif info.magic == MAGIC_IMAGE:
            width, height, num_classes, far = info.header[:4]
            info.extra = {"size": [width, height], "classes": num_classes, "far_depth": far}
        elif info.checksum_ok:
            arrays, meta, _ = cls.parse_checkpoint(cls._load(path, max_size))
            info.extra = {"arrays": len(arrays), "epoch": meta.get("epoch")}
        return info
