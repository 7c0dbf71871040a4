"""
SGS Container Formats v1
========================

Every container shares one framing:

    magic (4 bytes)            <- b"SGSV" | b"SGSL" | b"SGSI" | b"SGSC"
    version (u16)              <- rejected unless in SUPPORTED_VERSIONS
    config hash (16 bytes)     <- first 16 bytes of the producing config's SHA-256
    kind header (fixed)        <- see the *_HEADER structs below
    payload                    <- little-endian arrays
    checksum (32 bytes)        <- SHA-256 of the payload

Kinds:
    SGSV  semantic volume: w, h, d, C (u16), gamma (f32); f32 probabilities,
          shape w x h x d x (C+1), x-fastest order
    SGSL  label volume: same header as SGSV; u8 class ids, x-fastest order
    SGSI  semantic-depth image: width, height, C (u16), far_depth (f32),
          fx, fy, cx, cy (f32), pose R row-major + t (12 x f32);
          f32 depth plane then C+1 f32 semantic planes, row-major
    SGSC  checkpoint: u32 config length + config JSON, u32 array count, then
          per array: u16 name length, name, u8 ndim, u32 dims, f64 data

Design Decisions:
    - Fixed-size headers so a reader can identify and size a file from its
      first bytes (MAX_MAGIC_SCAN_BYTES)
    - Checksum trailer covers the payload only; headers are validated field by field
    - All numbers little-endian, packed with `struct` (no padding)
"""

import struct

MAGIC_VOLUME = b"SGSV"
MAGIC_LABELS = b"SGSL"
MAGIC_IMAGE = b"SGSI"
MAGIC_CHECKPOINT = b"SGSC"

MAGICS = {
    MAGIC_VOLUME: "semantic volume",
    MAGIC_LABELS: "label volume",
    MAGIC_IMAGE: "semantic-depth image",
    MAGIC_CHECKPOINT: "checkpoint",
}

# Format version
FORMAT_VERSION = 1

# Reject unknown versions instead of guessing at their layout
SUPPORTED_VERSIONS = frozenset({1})

CONFIG_HASH_BYTES = 16
CHECKSUM_BYTES = 32

# magic, version, config hash
PREAMBLE = struct.Struct("<4sH16s")
# w, h, d, C, gamma
VOLUME_HEADER = struct.Struct("<HHHHf")
# width, height, C, far_depth, fx, fy, cx, cy, pose (12 floats)
IMAGE_HEADER = struct.Struct("<HHHf4f12f")

# Safety limits
MAX_FILE_SIZE = 512 * 1024 * 1024   # 512MB max container size for reader
MAX_ARRAYS = 10_000                 # Max named arrays per checkpoint
MAX_ARRAY_NAME_LENGTH = 128
MAX_ARRAY_NDIM = 8
MAX_CLASSES = 255                   # u8 label ids leave room for the empty index

# Max bytes needed to identify a container
MAX_MAGIC_SCAN_BYTES = 4

EXTENSIONS = {
    MAGIC_VOLUME: ".sgsv",
    MAGIC_LABELS: ".sgsl",
    MAGIC_IMAGE: ".sgsi",
    MAGIC_CHECKPOINT: ".sgsc",
}
