"""Recurrent and feed-forward building blocks: GRU, bidirectional encoder, maxout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dcore import (
    ContractViolation,
    Parameter,
    Tensor,
    add,
    concat,
    matmul,
    max_pool_groups,
    mul,
    sigmoid,
    stack_rows,
    sub,
    tanh,
)


@dataclass
class GruParams:
    """Gate parameters of one GRU cell.

    Input weights are (d_out, d_in), recurrent weights (d_out, d_out),
    biases (d_out,).
    """

    W_z: Parameter
    W_r: Parameter
    W_c: Parameter
    U_z: Parameter
    U_r: Parameter
    U_c: Parameter
    b_z: Parameter
    b_r: Parameter
    b_c: Parameter

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    def parameters(self) -> list[Parameter]:
        return [
            self.W_z, self.W_r, self.W_c,
            self.U_z, self.U_r, self.U_c,
            self.b_z, self.b_r, self.b_c,
        ]


@dataclass
class BiRnnLayerParams:
    fwd: GruParams
    bwd: GruParams
    h0_fwd: Parameter
    h0_bwd: Parameter

    def parameters(self) -> list[Parameter]:
        return self.fwd.parameters() + self.bwd.parameters() + [self.h0_fwd, self.h0_bwd]


@dataclass
class BiRnnEncoderParams:
    """Stacked bidirectional GRU encoder with learned initial states.

    Layer l > 1 consumes the concatenated forward/backward outputs of
    layer l - 1, so its input dim is twice the previous hidden dim.
    """

    layers: list[BiRnnLayerParams]

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            need = 2 * self.layers[i - 1].fwd.hidden_dim
            got = self.layers[i].fwd.input_dim
            if got != need:
                raise ContractViolation(
                    f"encoder layer {i}: input dim {got}, expected {need}"
                )

    @property
    def output_dim(self) -> int:
        return 2 * self.layers[-1].fwd.hidden_dim

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


@dataclass
class MaxoutParams:
    """Linear map to units*pool pre-activations, max-pooled per unit."""

    W: Parameter  # (units * pool, d_in)
    b: Parameter  # (units * pool,)
    pool: int = 2

    def __post_init__(self):
        if self.W.shape[0] % self.pool != 0:
            raise ContractViolation(
                f"maxout: {self.W.shape[0]} pre-activations not divisible by pool {self.pool}"
            )

    @property
    def units(self) -> int:
        return self.W.shape[0] // self.pool

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


def gru_step(p: GruParams, s_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU update: s = (1 - z) * s_prev + z * c."""
    s_prev, x = _vec(s_prev), _vec(x)
    z = sigmoid(add(add(matmul(p.W_z.value, x), matmul(p.U_z.value, s_prev)), p.b_z.value))
    r = sigmoid(add(add(matmul(p.W_r.value, x), matmul(p.U_r.value, s_prev)), p.b_r.value))
    c = tanh(
        add(add(matmul(p.W_c.value, x), matmul(p.U_c.value, mul(r, s_prev))), p.b_c.value)
    )
    return add(mul(sub(1.0, z), s_prev), mul(z, c))


def birnn_encode(p: BiRnnEncoderParams, x) -> Tensor:
    """Encode an (L, d_in) feature matrix into an (L, d_h) representation.

    Sequence length is preserved; d_h is twice the top-layer hidden dim.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ContractViolation(f"birnn_encode: expected a nonempty (L, d) input, got {data.shape}")
    rows: list[Tensor] = [Tensor(data[t]) for t in range(data.shape[0])]
    for layer in p.layers:
        fwd_out: list[Tensor] = []
        s = layer.h0_fwd.value
        for t in range(len(rows)):
            s = gru_step(layer.fwd, s, rows[t])
            fwd_out.append(s)
        bwd_out: list[Tensor] = [None] * len(rows)  # type: ignore[list-item]
        s = layer.h0_bwd.value
        for t in reversed(range(len(rows))):
            s = gru_step(layer.bwd, s, rows[t])
            bwd_out[t] = s
        rows = [concat([f, b]) for f, b in zip(fwd_out, bwd_out)]
    return stack_rows(rows)


def maxout(p: MaxoutParams, v: Tensor) -> Tensor:
    """Max over each group of `pool` pre-activations."""
    pre = add(matmul(p.W.value, _vec(v)), p.b.value)
    return max_pool_groups(pre, p.pool)


def _vec(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 1:
        raise ContractViolation(f"expected a vector, got shape {t.shape}")
    return t
