"""Deterministic recurrent cells: Elman RNN, LSTM and the gate-level dropout LSTM.

LSTM gate parameters are stored fused: ``W_x`` is (input, 4H), ``W_h`` is
(H, 4H) and ``b`` is (4H,), with column blocks in the order forget, input,
output, candidate.  States are batch-row tensors of shape (B, H).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

GATES = ("f", "i", "o", "c")


class CellKind(str, Enum):
    ERNN_SIGMOID = "ernn-sigmoid"
    ERNN_TANH = "ernn-tanh"
    LSTM = "lstm"


@dataclass
class CellParams:
    kind: CellKind
    W_x: Tensor
    W_h: Tensor
    b: Tensor

    def __post_init__(self):
        self.kind = CellKind(self.kind)
        g, h = self.n_gates, self.hidden_size
        if self.W_h.shape != (h, g * h) or self.W_x.shape[1] != g * h or self.b.shape != (g * h,):
            raise ShapeError(
                f"inconsistent {self.kind.value} parameters: W_x {self.W_x.shape}, "
                f"W_h {self.W_h.shape}, b {self.b.shape}"
            )

    @property
    def n_gates(self) -> int:
        return 4 if self.kind is CellKind.LSTM else 1

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b}

    def gate(self, name: str) -> dict[str, np.ndarray]:
        """Views of one LSTM gate's input matrix, recurrent matrix and bias."""
        k = GATES.index(name)
        h = self.hidden_size
        sl = slice(k * h, (k + 1) * h)
        return {"W_x": self.W_x.data[:, sl], "W_h": self.W_h.data[:, sl], "b": self.b.data[sl]}

    def n_parameters(self) -> int:
        return self.W_x.size + self.W_h.size + self.b.size


def init_cell(kind, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float64) -> CellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases."""
    kind = CellKind(kind)
    g = 4 if kind is CellKind.LSTM else 1
    r = 1.0 / math.sqrt(hidden_size)
    W_x = rng.uniform(-r, r, size=(input_size, g * hidden_size)).astype(dtype)
    W_h = rng.uniform(-r, r, size=(hidden_size, g * hidden_size)).astype(dtype)
    return CellParams(
        kind,
        nx.parameter(W_x, "W_x", dtype),
        nx.parameter(W_h, "W_h", dtype),
        nx.parameter(np.zeros(g * hidden_size), "b", dtype),
    )


@dataclass
class RnnState:
    h: Tensor
    c: Tensor | None = None

    def detach(self) -> "RnnState":
        return RnnState(self.h.detach(), None if self.c is None else self.c.detach())


def zero_state(cell: CellParams, batch: int, dtype=np.float64) -> RnnState:
    h = Tensor(np.zeros((batch, cell.hidden_size), dtype=dtype))
    c = Tensor(np.zeros((batch, cell.hidden_size), dtype=dtype)) if cell.kind is CellKind.LSTM else None
    return RnnState(h, c)


def _check_step(params: CellParams, x: Tensor, h: Tensor) -> None:
    if x.data.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"input {x.shape} does not match input size {params.input_size}")
    if h.shape != (x.shape[0], params.hidden_size):
        raise ShapeError(f"state {h.shape} does not match ({x.shape[0]}, {params.hidden_size})")


def ernn_step(params: CellParams, x_prev: Tensor, h_prev: Tensor) -> Tensor:
    _check_step(params, x_prev, h_prev)
    pre = nx.add_bias(nx.add(nx.matmul(x_prev, params.W_x), nx.matmul(h_prev, params.W_h)), params.b)
    if params.kind is CellKind.ERNN_SIGMOID:
        return nx.sigmoid(pre)
    if params.kind is CellKind.ERNN_TANH:
        return nx.tanh(pre)
    raise ValueError("ernn_step needs an Elman cell")


def _lstm_from_preactivation(pre: Tensor, c_prev: Tensor) -> RnnState:
    f_pre, i_pre, o_pre, c_pre = nx.split_cols(pre, 4)
    f, i, o = nx.sigmoid(f_pre), nx.sigmoid(i_pre), nx.sigmoid(o_pre)
    cand = nx.tanh(c_pre)
    c = nx.add(nx.mul(f, c_prev), nx.mul(i, cand))
    return RnnState(nx.mul(o, nx.tanh(c)), c)


def lstm_step(params: CellParams, x_prev: Tensor, state: RnnState) -> RnnState:
    if params.kind is not CellKind.LSTM:
        raise ValueError("lstm_step needs an LSTM cell")
    _check_step(params, x_prev, state.h)
    pre = nx.add_bias(nx.add(nx.matmul(x_prev, params.W_x), nx.matmul(state.h, params.W_h)), params.b)
    return _lstm_from_preactivation(pre, state.c)


def cell_step(params: CellParams, x_prev: Tensor, state: RnnState) -> RnnState:
    if params.kind is CellKind.LSTM:
        return lstm_step(params, x_prev, state)
    return RnnState(ernn_step(params, x_prev, state.h))


# ---------------------------------------------------------------------------
# Gate-level dropout


@dataclass
class DropoutMasks:
    """Masks for the eight matrix-product terms of one LSTM step.

    ``x`` and ``h`` have shape (B, 4H) with column blocks ordered like the
    fused gates, so ``x[:, :H]`` is the forget-gate input mask and so on.
    """

    x: np.ndarray
    h: np.ndarray
    keep_x: float = 1.0
    keep_h: float = 1.0

    def mask(self, side: str, gate: str) -> np.ndarray:
        arr = self.x if side == "x" else self.h
        H = arr.shape[1] // 4
        k = GATES.index(gate)
        return arr[:, k * H:(k + 1) * H]

    @classmethod
    def ones(cls, batch: int, hidden: int) -> "DropoutMasks":
        return cls(np.ones((batch, 4 * hidden)), np.ones((batch, 4 * hidden)))


def bernoulli_mask(shape, keep: float, rng: np.random.Generator, inverted: bool = True) -> np.ndarray:
    if keep >= 1.0:
        return np.ones(shape)
    m = (nx.open_uniform(rng, shape) < keep).astype(np.float64)
    return m / keep if inverted else m


def sample_dropout_masks(
    batch: int, hidden: int, keep_x: float, keep_h: float, rng: np.random.Generator, inverted: bool = True
) -> DropoutMasks:
    shape = (batch, 4 * hidden)
    return DropoutMasks(
        bernoulli_mask(shape, keep_x, rng, inverted),
        bernoulli_mask(shape, keep_h, rng, inverted),
        keep_x,
        keep_h,
    )


def dropout_lstm_step(params: CellParams, masks: DropoutMasks, x_prev: Tensor, state: RnnState) -> RnnState:
    """LSTM step with each gate's input and recurrent product masked before its nonlinearity."""
    if params.kind is not CellKind.LSTM:
        raise ValueError("dropout_lstm_step needs an LSTM cell")
    _check_step(params, x_prev, state.h)
    expected = (x_prev.shape[0], 4 * params.hidden_size)
    if masks.x.shape != expected or masks.h.shape != expected:
        raise ShapeError(f"dropout masks must have shape {expected}")
    ax = nx.mul(nx.matmul(x_prev, params.W_x), Tensor(masks.x.astype(x_prev.dtype, copy=False)))
    ah = nx.mul(nx.matmul(state.h, params.W_h), Tensor(masks.h.astype(x_prev.dtype, copy=False)))
    pre = nx.add_bias(nx.add(ax, ah), params.b)
    return _lstm_from_preactivation(pre, state.c)


# ---------------------------------------------------------------------------
# Stacks


@dataclass
class SequenceOutput:
    outputs: list[Tensor]                       # final-layer h per step
    layer_outputs: list[list[Tensor]] = field(default_factory=list)  # [t][layer]
    final_states: list[RnnState] = field(default_factory=list)


def forward_sequence(
    stack: list[CellParams],
    inputs: list[Tensor],
    init_states: list[RnnState],
    masks: list[list[DropoutMasks | None]] | None = None,
) -> SequenceOutput:
    """Run a layer stack over already-embedded inputs.

    ``masks[t][l]`` (optional) switches layer ``l`` at step ``t`` to the
    dropout form.
    """
    if not inputs:
        raise ValueError("need at least one time step")
    if len(init_states) != len(stack):
        raise ShapeError("one initial state per layer is required")
    states = list(init_states)
    outputs, per_layer = [], []
    for t, x in enumerate(inputs):
        layer_in = x
        row = []
        for l, cell in enumerate(stack):
            m = masks[t][l] if masks is not None else None
            if m is not None:
                states[l] = dropout_lstm_step(cell, m, layer_in, states[l])
            else:
                states[l] = cell_step(cell, layer_in, states[l])
            layer_in = states[l].h
            row.append(layer_in)
        per_layer.append(row)
        outputs.append(layer_in)
    return SequenceOutput(outputs, per_layer, states)
