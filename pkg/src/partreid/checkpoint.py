"""Binary checkpoint container.

Layout (all integers little-endian u32, values little-endian IEEE-754 f32,
row-major):

    magic "PMAN" | version | tensor count
    per tensor: name length | utf-8 name | ndim | dims... | values

Round-trips are bit-exact for float32 arrays. Feature bundles reuse the same
container with "<image_id>/<field>" keys.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMAN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save(path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} "
                f"at byte offset {self.off}, file has {len(self.blob)}")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic at byte offset 0 in {path}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"dims of '{name}'"))
        n_values = int(np.prod(dims)) if ndim else 1
        raw = r.take(4 * n_values, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.off != len(blob):
        raise CheckpointError(
            f"trailing garbage: {len(blob) - r.off} bytes at byte offset {r.off}")
    return tensors


def save_bundles(path, bundles):
    """Serialize FeatureBundles keyed by image id."""
    tensors: dict[str, np.ndarray] = {}
    for b in bundles:
        tensors[f"{b.image_id}/f_G"] = b.f_g
        tensors[f"{b.image_id}/f_S"] = b.f_s
        if b.f_t is not None:
            tensors[f"{b.image_id}/f_T"] = b.f_t
    save(path, tensors)


def load_bundles(path):
    from .pmnet import FeatureBundle

    tensors = load(path)
    by_id: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        image_id, _, part = key.rpartition("/")
        if not image_id:
            raise CheckpointError(f"bundle key '{key}' lacks an image id")
        by_id.setdefault(image_id, {})[part] = arr
    bundles = []
    for image_id, parts in by_id.items():
        if "f_G" not in parts or "f_S" not in parts:
            raise CheckpointError(f"bundle '{image_id}' is missing f_G or f_S")
        bundles.append(FeatureBundle(image_id=image_id, f_g=parts["f_G"],
                                     f_s=parts["f_S"], f_t=parts.get("f_T")))
    return bundles
