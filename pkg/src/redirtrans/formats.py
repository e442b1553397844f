"""Binary artifact formats: latents, datasets, worlds, estimators and redirectors.

All integers are u32 little-endian and all payloads f32 little-endian, so a
write followed by a read is bitwise lossless.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import redirector as R
from . import tensor as T
from . import world as W

LATENT_MAGIC = b"RDTL"
LATENT_VERSION = 1
DATASET_MAGIC = b"RDTD"
DATASET_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised for malformed or truncated artifact files."""


def _check_header(buf: bytes, magic: bytes, version: int, kind: str, n_words: int) -> tuple[int, ...]:
    header = 4 + 4 * (1 + n_words)
    if len(buf) < 4 or buf[:4] != magic:
        raise FormatError(f"not a {kind} file")
    if len(buf) < header:
        raise FormatError(f"truncated {kind} header: expected at least {header} bytes, got {len(buf)}")
    got_version, *words = struct.unpack_from(f"<{1 + n_words}I", buf, 4)
    if got_version != version:
        raise FormatError(f"unsupported {kind} version {got_version} (expected {version})")
    return tuple(words)


def _check_size(buf: bytes, expected: int, kind: str) -> None:
    if len(buf) < expected:
        raise FormatError(f"truncated {kind} file: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{kind} file has {len(buf) - expected} trailing bytes: expected {expected} bytes, "
                          f"got {len(buf)}")


# latents: "RDTL" | version | K | D | K*D f32

def encode_latent(latent: np.ndarray) -> bytes:
    latent = np.asarray(latent)
    if latent.ndim != 2:
        raise ValueError(f"latent must be K x D, got shape {latent.shape}")
    k, d = latent.shape
    return LATENT_MAGIC + struct.pack("<3I", LATENT_VERSION, k, d) + latent.astype(_F32).tobytes()


def decode_latent(buf: bytes) -> np.ndarray:
    k, d = _check_header(buf, LATENT_MAGIC, LATENT_VERSION, "RDTL", 2)
    _check_size(buf, 16 + 4 * k * d, "RDTL")
    return np.frombuffer(buf, _F32, k * d, 16).reshape(k, d).astype(np.float32)


def write_latent(path, latent: np.ndarray) -> None:
    Path(path).write_bytes(encode_latent(latent))


def read_latent(path) -> np.ndarray:
    return decode_latent(Path(path).read_bytes())


# datasets: "RDTD" | version | count | per sample (identity u32, 4 f32, K*D f32, side^2 f32)
# the header does not carry K, D or side; readers take them from the world

def _record(K: int, D: int, side: int) -> np.dtype:
    return np.dtype([("identity", "<u4"), ("cond", _F32, (4,)), ("latent", _F32, (K * D,)),
                     ("image", _F32, (side * side,))])


def encode_dataset(data: W.Dataset) -> bytes:
    n, k, d = data.latent.shape
    side = int(round(np.sqrt(data.image.shape[1])))
    if side * side != data.image.shape[1]:
        raise ValueError("images must be square")
    rows = np.empty(n, _record(k, d, side))
    rows["identity"] = data.identity
    rows["cond"] = data.conditions
    rows["latent"] = data.latent.reshape(n, -1)
    rows["image"] = data.image
    return DATASET_MAGIC + struct.pack("<2I", DATASET_VERSION, n) + rows.tobytes()


def decode_dataset(buf: bytes, K: int, D: int, image_side: int) -> W.Dataset:
    (n,) = _check_header(buf, DATASET_MAGIC, DATASET_VERSION, "RDTD", 1)
    rec = _record(K, D, image_side)
    _check_size(buf, 12 + n * rec.itemsize, "RDTD")
    rows = np.frombuffer(buf, rec, n, 12)
    cond = rows["cond"].astype(np.float32)
    return W.Dataset(rows["identity"].astype(np.int64), cond[:, :2].copy(), cond[:, 2:].copy(),
                     rows["latent"].reshape(n, K, D).astype(np.float32), rows["image"].astype(np.float32))


def write_dataset(path, data: W.Dataset) -> None:
    Path(path).write_bytes(encode_dataset(data))


def read_dataset(path, world: W.WorldSpec) -> W.Dataset:
    return decode_dataset(Path(path).read_bytes(), world.K, world.D, world.image_side)


# worlds, estimators and redirectors all ride on the tensor checkpoint format

def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def save_world(path, world: W.WorldSpec) -> None:
    """Frozen arrays to an RDTC checkpoint, scalar settings to a ``.meta`` sidecar."""
    T.save_checkpoint(path, world.arrays)
    meta = W.world_meta(world)
    meta["planted_layers"] = ";".join(",".join(str(k) for k in s) for s in meta["planted_layers"])
    _meta_path(path).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")


def load_world(path) -> W.WorldSpec:
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise FormatError(f"world metadata not found: {meta_file}")
    meta = {}
    for line in meta_file.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    try:
        meta["planted_layers"] = [[int(k) for k in s.split(",")] for s in meta["planted_layers"].split(";")]
        return W.world_from_arrays(T.load_checkpoint(path), meta)
    except KeyError as exc:
        raise FormatError(f"world metadata is missing {exc.args[0]}") from None


def save_estimator(path, params: dict[str, T.Tensor]) -> None:
    T.save_checkpoint(path, {k: v.data for k, v in params.items()})


def load_estimator(path) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v) for k, v in T.load_checkpoint(path).items()}


def save_redirector(path, params: R.RedirectorParams) -> None:
    T.save_checkpoint(path, params.to_checkpoint())


def load_redirector(path) -> R.RedirectorParams:
    return R.RedirectorParams.from_checkpoint(T.load_checkpoint(path))


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of a square image with values in [-1, 1]."""
    image = np.asarray(image, dtype=np.float64).ravel()
    side = int(round(np.sqrt(image.size)))
    if side * side != image.size:
        raise ValueError("images must be square")
    pixels = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{side} {side}\n255\n".encode("ascii") + pixels.tobytes())
