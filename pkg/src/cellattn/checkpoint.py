"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"CATNCKPT"
    version      u32
    config_len   u32, then config_len bytes of canonical ``key=value`` text
    hash_len     u8,  then the config hash as ASCII
    n_tensors    u32
    per tensor:  u16 name length, name (UTF-8), u8 itemsize (4 or 8),
                 u8 ndim, ndim x u32 extents, raw little-endian floats
    crc32        u32 over every preceding byte

Tensors are written in declaration order: parameters first, then buffers
(batch-norm running statistics).
"""
import struct
import zlib

import numpy as np

from cellattn.models import ModelConfig, Network

MAGIC = b"CATNCKPT"
FORMAT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def checkpoint_save(model):
    """Serialize ``model`` (config, parameters and running statistics) to bytes."""
    config_text = model.config.to_text().encode()
    chash = model.config.hash().encode()
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(config_text)), config_text,
             struct.pack("<B", len(chash)), chash,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype.itemsize not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[arr.dtype.itemsize], copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_config(data):
    """Return the :class:`ModelConfig` stored in a checkpoint without loading weights."""
    return _parse(bytes(data))[0]


def _parse(data):
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint too short")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    body, trailer = data[:-4], data[-4:]
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated stream)")
    (clen,) = r.unpack("<I", "config length")
    config = ModelConfig.from_text(r.take(clen, "config").decode())
    (hlen,) = r.unpack("<B", "hash length")
    stored_hash = r.take(hlen, "config hash").decode()
    if stored_hash != config.hash():
        raise CheckpointError(f"stored config hash {stored_hash} does not match config text ({config.hash()})")
    (n,) = r.unpack("<I", "tensor count")
    state = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode()
        itemsize, ndim = r.unpack("<BB", f"header of {name}")
        if itemsize not in _DTYPES:
            raise CheckpointError(f"bad element size {itemsize} for {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(count * itemsize, f"data of {name}")
        state[name] = np.frombuffer(raw, dtype=_DTYPES[itemsize]).reshape(shape).astype(
            _DTYPES[itemsize].newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor data")
    return config, state


def checkpoint_load(data, expected_config=None):
    """Rebuild a network from checkpoint bytes.

    If ``expected_config`` is given, its hash must match the stored one.
    Nothing is returned unless every tensor parses and matches the config.
    """
    config, state = _parse(bytes(data))
    if expected_config is not None and expected_config.hash() != config.hash():
        raise CheckpointError(f"config mismatch: checkpoint was saved with config {config.hash()}, "
                              f"expected {expected_config.hash()}")
    model = Network(config)
    own = model.state_dict()
    if list(own) != list(state):
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        raise CheckpointError(f"checkpoint tensors do not match config {config.hash()}: "
                              f"missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in state.items():
        if own[name].shape != arr.shape:
            raise CheckpointError(f"shape of {name} is {arr.shape}, config expects {own[name].shape}")
    dtypes = {a.dtype for a in state.values()}
    if len(dtypes) == 1:
        model.astype(dtypes.pop())
    model.load_state_dict(state)
    return model


def save_file(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_save(model))


def load_file(path, expected_config=None):
    with open(path, "rb") as fh:
        return checkpoint_load(fh.read(), expected_config)
