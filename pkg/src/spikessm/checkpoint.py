"""Binary model container.

Layout (all integers little-endian uint32, all floats little-endian
float32):

    magic   4 bytes         b"SPKM"
    version uint32          currently 1
    cfg_len uint32
    cfg     cfg_len bytes   UTF-8 JSON of the model configuration
    count   uint32          number of named tensors
    per tensor:
        name_len uint32
        name     UTF-8 bytes
        rank     uint32
        dims     rank * uint32
        data     prod(dims) float32, row-major

Round-trips are bit-exact: parameters are stored and reloaded as
float32 without re-encoding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .mamba2 import LanguageModel, Mamba2Config
from .neurons import NeuronConfig
from .tensor import ContractError

MAGIC = b"SPKM"
VERSION = 1


def config_to_json(cfg: Mamba2Config) -> str:
    d = asdict(cfg)
    d["sgc_layers"] = sorted(cfg.sgc_layers)
    return json.dumps(d, sort_keys=True)


def config_from_json(text: str) -> Mamba2Config:
    d = json.loads(text)
    d["neuron"] = NeuronConfig(**d["neuron"])
    d["sgc_layers"] = frozenset(d["sgc_layers"])
    return Mamba2Config(**d)


def save(path, model: LanguageModel) -> None:
    cfg_bytes = config_to_json(model.cfg).encode("utf-8")
    named = model.named_parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_raw(path) -> tuple[Mamba2Config, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: not a model container (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    cfg = config_from_json(blob[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.copy()
    if off != len(blob):
        raise ContractError(f"{path}: trailing bytes in container")
    return cfg, tensors


def load(path) -> LanguageModel:
    cfg, tensors = load_raw(path)
    model = LanguageModel(cfg)
    model.load_state(tensors)
    return model
