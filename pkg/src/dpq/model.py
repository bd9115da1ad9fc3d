"""Block-structured feedforward denoiser with per-block quantizer slots.

Each block is one affine layer plus its activation; a learned per-step
time embedding is added after the first affine. With no quantizer
installed, the forward pass is the untouched full-precision path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import grid_index
from .errors import ConfigError
from .quant import QuantParams, ste_quantize
from .tensor import Tensor, affine, no_grad, silu, tslice


@dataclass
class Block:
    weight: Tensor          # (in, out), trainable shadow copy
    bias: Tensor            # (out,)
    activation: str         # "silu" | "none"
    weight_q: list[QuantParams] | None = None   # per output channel
    act_q: QuantParams | None = None            # per tensor

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor, extra: Tensor | None = None) -> Tensor:
        w = ste_quantize(self.weight, self.weight_q) if self.weight_q is not None else self.weight
        h = affine(x, w, self.bias)
        if extra is not None:
            h = h + extra
        if self.activation == "silu":
            h = silu(h)
        if self.act_q is not None:
            h = ste_quantize(h, self.act_q)
        return h

    def clone(self) -> "Block":
        return Block(
            weight=Tensor(self.weight.data.copy(), requires_grad=True),
            bias=Tensor(self.bias.data.copy(), requires_grad=True),
            activation=self.activation,
            weight_q=None if self.weight_q is None
            else [QuantParams(**vars(p)) for p in self.weight_q],
            act_q=None if self.act_q is None else QuantParams(**vars(self.act_q)),
        )


@dataclass
class BlockIO:
    """Cached per-block forward data over a calibration set."""

    inputs: np.ndarray
    outputs: np.ndarray
    extra: np.ndarray | None   # time-embedding rows, first block only


class DenoiserModel:
    """x-prediction denoiser: forward(z_t, t) -> xhat with t on the grid."""

    def __init__(self, blocks: list[Block], time_emb: Tensor, grid_T: int, step_count: int):
        self.blocks = blocks
        self.time_emb = time_emb
        self.grid_T = grid_T
        self.step_count = step_count

    @classmethod
    def create(cls, data_dim: int = 2, width: int = 64, n_blocks: int = 4,
               grid_T: int = 64, seed: int = 0) -> "DenoiserModel":
        if n_blocks < 2:
            raise ConfigError(f"need at least 2 blocks (input and output), got {n_blocks}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD40D31]))
        dims = [data_dim] + [width] * (n_blocks - 1) + [data_dim]
        blocks = []
        for i in range(n_blocks):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            blocks.append(Block(
                weight=Tensor(w, requires_grad=True),
                bias=Tensor(np.zeros(fan_out), requires_grad=True),
                activation="silu" if i < n_blocks - 1 else "none",
            ))
        emb = 0.05 * rng.standard_normal((grid_T + 1, width))
        return cls(blocks, Tensor(emb, requires_grad=True), grid_T, step_count=grid_T)

    @property
    def data_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def width(self) -> int:
        return self.blocks[0].out_dim

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for b in self.blocks:
            params.extend([b.weight, b.bias])
        params.append(self.time_emb)
        return params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def layer_dims(self) -> list[tuple[int, int]]:
        return [(b.in_dim, b.out_dim) for b in self.blocks]

    def _embedding(self, t) -> Tensor:
        idx = grid_index(t, self.grid_T)
        return tslice(self.time_emb, idx)

    def forward(self, z, t) -> Tensor:
        h = z if isinstance(z, Tensor) else Tensor(z)
        emb = self._embedding(t)
        for i, block in enumerate(self.blocks):
            h = block.forward(h, extra=emb if i == 0 else None)
        return h

    def forward_with_block_io(self, z: np.ndarray, t) -> tuple[np.ndarray, list[BlockIO]]:
        """Forward pass that also captures each block's input and output."""
        ios: list[BlockIO] = []
        with no_grad():
            emb = self._embedding(t).data
            if emb.ndim == 1:
                emb = np.broadcast_to(emb, (z.shape[0], emb.shape[0])).copy()
            h = np.asarray(z, dtype=np.float64)
            for i, block in enumerate(self.blocks):
                extra = emb if i == 0 else None
                out = block.forward(Tensor(h), extra=None if extra is None else Tensor(extra)).data
                ios.append(BlockIO(inputs=h, outputs=out, extra=extra))
                h = out
        return h, ios

    def clone(self) -> "DenoiserModel":
        return DenoiserModel(
            blocks=[b.clone() for b in self.blocks],
            time_emb=Tensor(self.time_emb.data.copy(), requires_grad=True),
            grid_T=self.grid_T,
            step_count=self.step_count,
        )

    def weight_checksum(self) -> str:
        """SHA-256 over all parameter bytes; detects any mutation."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def weight_bits(self) -> int:
        """Uniform weight bit-width, or 32 when unquantized."""
        for b in self.blocks:
            if b.weight_q is not None:
                return b.weight_q[0].bits
        return 32

    def act_bits(self) -> int:
        for b in self.blocks:
            if b.act_q is not None:
                return b.act_q.bits
        return 32
