"""FXDR checkpoint format.

Layout: magic "FXDR", uint32 LE version, uint32-length-prefixed UTF-8 JSON
model config, uint32 tensor count, then per tensor: uint32-length-prefixed
name, uint8 rank, uint32 dims, row-major IEEE-754 float64 little-endian
payload. Tensors are written in a fixed order so identical weights produce
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import DraftWeights, FrozenWeights, ModelConfig

MAGIC = b"FXDR"
VERSION = 1


def _write_tensor(f, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        f.write(struct.pack("<I", dim))
    f.write(data.tobytes(order="C"))


def save_checkpoint(path: str | Path, config: ModelConfig, frozen: FrozenWeights, draft: DraftWeights) -> Path:
    path = Path(path)
    tensors = frozen.param_items() + draft.param_items()
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)
    return path


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, FrozenWeights, DraftWeights]:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path} is not an FXDR checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        config = ModelConfig.from_dict(json.loads(_read_exact(f, cfg_len).decode("utf-8")))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if dims else 1
            payload = _read_exact(f, 8 * n_items)
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)

    def take(name: str) -> np.ndarray:
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name}")
        return tensors[name]

    frozen = FrozenWeights(
        embed=take("embed"),
        wq=[take(f"layer{l}.wq") for l in range(config.n_layers)],
        wk=[take(f"layer{l}.wk") for l in range(config.n_layers)],
        wv=[take(f"layer{l}.wv") for l in range(config.n_layers)],
        wo=[take(f"layer{l}.wo") for l in range(config.n_layers)],
        ffn_w1=[take(f"layer{l}.ffn_w1") for l in range(config.n_layers)],
        ffn_w2=[take(f"layer{l}.ffn_w2") for l in range(config.n_layers)],
        attn_gain=[take(f"layer{l}.attn_gain") for l in range(config.n_layers)],
        ffn_gain=[take(f"layer{l}.ffn_gain") for l in range(config.n_layers)],
        final_gain=take("final_gain"),
        head=take("head"),
    )
    draft = DraftWeights(
        wq=[take(f"draft{l}.wq") for l in range(config.n_draft_layers)],
        wk=[take(f"draft{l}.wk") for l in range(config.n_draft_layers)],
        wv=[take(f"draft{l}.wv") for l in range(config.n_draft_layers)],
        wo=[take(f"draft{l}.wo") for l in range(config.n_draft_layers)],
        mask_embed=take("mask_embed"),
        calib_w1=take("calib.w1"),
        calib_b1=take("calib.b1"),
        calib_w2=take("calib.w2"),
        calib_b2=take("calib.b2"),
    )
    return config, frozen, draft
