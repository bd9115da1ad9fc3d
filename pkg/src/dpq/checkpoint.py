"""Checkpoint persistence.

Layout: magic "DPQCKPT1", one version byte, a little-endian uint32 manifest
length, the UTF-8 JSON manifest (architecture, step count, quantizer params
as decimal text), then every parameter array as little-endian float64 in
declaration order (per block weight then bias, then the time embedding).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError
from .model import Block, DenoiserModel
from .quant import QuantParams
from .tensor import Tensor

MAGIC = b"DPQCKPT1"
VERSION = 1


def _qp_to_json(p: QuantParams) -> dict:
    return {"bits": p.bits, "scale": repr(p.scale), "zero_point": repr(p.zero_point),
            "clip_min": repr(p.clip_min), "clip_max": repr(p.clip_max)}


def _qp_from_json(d: dict) -> QuantParams:
    return QuantParams(bits=int(d["bits"]), scale=float(d["scale"]),
                       zero_point=float(d["zero_point"]), clip_min=float(d["clip_min"]),
                       clip_max=float(d["clip_max"]))


def save_checkpoint(model: DenoiserModel, path: str) -> None:
    manifest = {
        "arch": {
            "blocks": [{"in": b.in_dim, "out": b.out_dim, "activation": b.activation}
                       for b in model.blocks],
            "grid_T": model.grid_T,
            "step_count": model.step_count,
        },
        "quant": [
            {
                "w": None if b.weight_q is None else [_qp_to_json(p) for p in b.weight_q],
                "a": None if b.act_q is None else _qp_to_json(b.act_q),
            }
            for b in model.blocks
        ],
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("B", VERSION))
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> DenoiserModel:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("B", f.read(1))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (length,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(length).decode("utf-8"))

        def read_array(shape) -> np.ndarray:
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ContractError(f"{path}: truncated parameter data")
            return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

        blocks = []
        for spec_b, spec_q in zip(manifest["arch"]["blocks"], manifest["quant"]):
            w = read_array((spec_b["in"], spec_b["out"]))
            b = read_array((spec_b["out"],))
            blocks.append(Block(
                weight=Tensor(w, requires_grad=True),
                bias=Tensor(b, requires_grad=True),
                activation=spec_b["activation"],
                weight_q=None if spec_q["w"] is None
                else [_qp_from_json(d) for d in spec_q["w"]],
                act_q=None if spec_q["a"] is None else _qp_from_json(spec_q["a"]),
            ))
        grid_T = int(manifest["arch"]["grid_T"])
        width = blocks[0].out_dim
        emb = read_array((grid_T + 1, width))
    return DenoiserModel(blocks=blocks, time_emb=Tensor(emb, requires_grad=True),
                         grid_T=grid_T, step_count=int(manifest["arch"]["step_count"]))
