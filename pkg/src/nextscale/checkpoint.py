"""Binary checkpoint files for models and tokenizer weights.

Layout (all integers little-endian):

    magic   4 bytes  b"VARP"
    version u32      currently 1
    count   u32      number of directory entries
    entry*  count times, names sorted ascending:
        name_len u32, name UTF-8, rank u32, extents rank x u32,
        payload prod(extents) x float64
    crc32   u32      over every preceding byte

Two saves of the same object are byte-identical (sorted directory, no
timestamps), and load(save(x)) restores every tensor bit for bit.  The
object kind, its config, and the prompt vocabulary ride along as reserved
entries whose payloads are Unicode code points of canonical JSON.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ContractError,
    CorruptCheckpointError,
)
from .model import PromptVocab, VarConfig, VarModel
from .tokenizer import AutoencoderConfig, AutoencoderWeights, ScaleSchedule

MAGIC = b"VARP"
VERSION = 1

_KIND = "__kind__"
_CONFIG = "__config__"
_VOCAB = "__vocab__"
_RESERVED = (_KIND, _CONFIG, _VOCAB)


def _text_tensor(s: str) -> np.ndarray:
    return np.array([ord(c) for c in s], dtype=np.float64)


def _tensor_text(a: np.ndarray) -> str:
    return "".join(chr(int(v)) for v in np.asarray(a).reshape(-1))


def _config_json(cfg) -> str:
    d = asdict(cfg)
    d["schedule"] = [list(e) for e in d["schedule"]["extents"]]
    return json.dumps(d, sort_keys=True)


def _collect_tensors(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, VarModel):
        tensors = {n: obj.params[n].data for n in obj.param_names()}
        tensors[_KIND] = _text_tensor("var-model")
        tensors[_CONFIG] = _text_tensor(_config_json(obj.cfg))
        tensors[_VOCAB] = _text_tensor(json.dumps(list(obj.vocab.tokens)))
        return tensors
    if isinstance(obj, AutoencoderWeights):
        tensors = {n: obj.params[n].data for n in sorted(obj.params)}
        tensors[_KIND] = _text_tensor("autoencoder")
        tensors[_CONFIG] = _text_tensor(_config_json(obj.cfg))
        return tensors
    raise ContractError("checkpointing supports VarModel and AutoencoderWeights")


def save_checkpoint(path, obj) -> None:
    tensors = _collect_tensors(obj)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def _parse_directory(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16:
        raise CorruptCheckpointError("file too short for a checkpoint")
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic; not a checkpoint file")
    body, tail = buf[:-4], buf[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(body):
        raise CorruptCheckpointError("CRC mismatch; file is corrupt or truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    pos = 12
    end = len(body)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 4 > end:
            raise CorruptCheckpointError("directory entry overruns the file")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + name_len + 4 > end:
            raise CorruptCheckpointError("directory entry overruns the file")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 4 * rank > end:
            raise CorruptCheckpointError("directory entry overruns the file")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if pos + 8 * n > end:
            raise CorruptCheckpointError("tensor payload overruns the file")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        pos += 8 * n
    if pos != end:
        raise CorruptCheckpointError("trailing bytes after the tensor directory")
    return tensors


def _restore(template_params: dict, loaded: dict[str, np.ndarray]) -> None:
    names = set(loaded) - set(_RESERVED)
    expected = set(template_params)
    if names != expected:
        raise CorruptCheckpointError("tensor directory does not match the config")
    for n in expected:
        if template_params[n].data.shape != loaded[n].shape:
            raise CorruptCheckpointError(f"tensor {n!r} has the wrong extent")
        template_params[n].data = loaded[n]


def load_checkpoint(path):
    """Rebuild the saved object; no partial state escapes a bad file."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint: {e.strerror}") from None
    tensors = _parse_directory(buf)
    for key in (_KIND, _CONFIG):
        if key not in tensors:
            raise CorruptCheckpointError("missing checkpoint metadata")
    kind = _tensor_text(tensors[_KIND])
    meta = json.loads(_tensor_text(tensors[_CONFIG]))
    schedule = ScaleSchedule(tuple(tuple(e) for e in meta.pop("schedule")))
    if kind == "var-model":
        if _VOCAB not in tensors:
            raise CorruptCheckpointError("missing checkpoint metadata")
        vocab = PromptVocab(tuple(json.loads(_tensor_text(tensors[_VOCAB]))))
        model = VarModel.initialize(VarConfig(schedule=schedule, **meta), vocab, seed=0)
        _restore(model.params, tensors)
        return model
    if kind == "autoencoder":
        weights = AutoencoderWeights.initialize(
            AutoencoderConfig(schedule=schedule, **meta), seed=0
        )
        _restore(weights.params, tensors)
        return weights
    raise CorruptCheckpointError(f"unknown checkpoint kind {kind!r}")
