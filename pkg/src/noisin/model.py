"""Noise-injected recurrent language model and its training objective.

The noisy hidden state of every layer is ``z = f(x, z_prev) + eps`` (additive)
or ``z = f(x, z_prev) * eps`` (multiplicative), with fresh noise per step,
unit and batch row.  With ``placement="readout"`` the recurrence runs on the
clean state and only the copy handed to the likelihood head is perturbed,
which makes the noisy state conditionally unbiased for the deterministic one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nx
from .expfam import LikelihoodHead, natural_param, nll_rows
from .noise import Mode, NoiseSpec, sample_injection
from .numerics import NumericalError, Tensor
from .rnn import (
    CellKind,
    CellParams,
    DropoutMasks,
    RnnState,
    bernoulli_mask,
    cell_step,
    dropout_lstm_step,
    init_cell,
    sample_dropout_masks,
    zero_state,
)


class Placement(str, Enum):
    ALL = "all"
    READOUT = "readout"


@dataclass(frozen=True)
class DropoutConfig:
    """Drop rates for the gate inputs, the recurrent products and the readout."""

    input: float = 0.0
    recurrent: float = 0.0
    output: float = 0.0
    per_sequence: bool = False

    def __post_init__(self):
        for name in ("input", "recurrent", "output"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"dropout rate {name}={v} must lie in [0, 1)")

    @property
    def gates_active(self) -> bool:
        return self.input > 0 or self.recurrent > 0


@dataclass
class NoisinModel:
    cells: list[CellParams]
    head: LikelihoodHead
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(mode=Mode.OFF))
    embedding: Tensor | None = None
    k: int = 1
    placement: Placement = Placement.ALL
    dropout: DropoutConfig = field(default_factory=DropoutConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one Monte Carlo sample")
        self.placement = Placement(self.placement)
        if self.dropout.gates_active and any(c.kind is not CellKind.LSTM for c in self.cells):
            raise ValueError("gate-level dropout is defined for LSTM cells only")

    @property
    def hidden_size(self) -> int:
        return self.cells[-1].hidden_size

    @property
    def dtype(self):
        return self.head.V.dtype

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.embedding is not None:
            out["embedding"] = self.embedding
        for l, cell in enumerate(self.cells):
            for k, v in cell.parameters().items():
                out[f"layer{l}.{k}"] = v
        for k, v in self.head.parameters().items():
            out[f"head.{k}"] = v
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_state(self, batch: int) -> list[RnnState]:
        return [zero_state(c, batch, self.dtype) for c in self.cells]

    def with_noise(self, spec: NoiseSpec) -> "NoisinModel":
        return dataclasses.replace(self, noise=spec)

    def deterministic(self) -> "NoisinModel":
        return dataclasses.replace(self, noise=NoiseSpec(self.noise.family, self.noise.gamma, self.noise.alpha, Mode.OFF))

    def embed(self, x) -> Tensor:
        if self.embedding is not None:
            return nx.take_rows(self.embedding, np.asarray(x))
        return Tensor(np.asarray(x, dtype=self.dtype))


def build_model(
    vocab_size: int,
    hidden: int,
    layers: int = 1,
    cell: str = "lstm",
    family: str = "categorical",
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
    input_size: int | None = None,
    output_size: int | None = None,
    embedding_dim: int | None = None,
    dtype=np.float64,
    **kwargs,
) -> NoisinModel:
    """Initialize a model: embeddings U(-0.1, 0.1), weights U(-1/sqrt(H), 1/sqrt(H)), zero biases.

    Categorical models embed token ids; other heads read ``input_size``
    dimensional observation vectors directly.
    """
    rng = rng if rng is not None else nx.make_rng(1111)
    embedding = None
    if family == "categorical":
        emb_dim = embedding_dim or hidden
        embedding = nx.parameter(rng.uniform(-0.1, 0.1, size=(vocab_size, emb_dim)), "embedding", dtype)
        first_in = emb_dim
        out = output_size or vocab_size
    else:
        first_in = input_size or vocab_size
        out = output_size or vocab_size
    cells = []
    for l in range(layers):
        cells.append(init_cell(cell, first_in if l == 0 else hidden, hidden, rng, dtype))
    r = 1.0 / np.sqrt(hidden)
    V = nx.parameter(rng.uniform(-r, r, size=(hidden, out)), "V", dtype)
    b = nx.parameter(np.zeros(out), "b", dtype)
    head = LikelihoodHead(family, V, b, kwargs.pop("sigma2", 1.0))
    return NoisinModel(cells, head, noise or NoiseSpec(mode=Mode.OFF), embedding, **kwargs)


# ---------------------------------------------------------------------------
# Injection and one recurrent step


def inject(spec: NoiseSpec, f_out: Tensor, eps_inj) -> Tensor:
    """Perturb a transition output with injection noise from ``noise.as_injection``."""
    if spec.mode is Mode.OFF:
        return f_out
    eps = eps_inj if isinstance(eps_inj, Tensor) else Tensor(np.asarray(eps_inj, dtype=f_out.dtype))
    if eps.shape != f_out.shape:
        raise nx.ShapeError(f"noise shape {eps.shape} does not match state {f_out.shape}")
    if spec.mode is Mode.ADDITIVE:
        return nx.add(f_out, eps)
    return nx.mul(f_out, eps)


@dataclass
class StepRandomness:
    """All random draws consumed by one time step."""

    eps: list[np.ndarray] | None = None
    masks: list[DropoutMasks | None] | None = None
    out_mask: np.ndarray | None = None


def draw_step(
    model: NoisinModel,
    batch: int,
    noise_rng: np.random.Generator | None,
    dropout_rng: np.random.Generator | None,
    train: bool,
) -> StepRandomness:
    rand = StepRandomness()
    H = [c.hidden_size for c in model.cells]
    if model.noise.active:
        layers = range(len(H)) if model.placement is Placement.ALL else [len(H) - 1]
        rand.eps = [sample_injection(model.noise, (batch, H[l]), noise_rng) for l in layers]
    d = model.dropout
    if train and d.gates_active:
        rand.masks = [
            sample_dropout_masks(batch, h, 1.0 - d.input, 1.0 - d.recurrent, dropout_rng) for h in H
        ]
    if train and d.output > 0:
        rand.out_mask = bernoulli_mask((batch, H[-1]), 1.0 - d.output, dropout_rng)
    return rand


def draw_rollout(
    model: NoisinModel, steps: int, batch: int, rng: np.random.Generator, train: bool = True
) -> list[StepRandomness]:
    """Pre-draw the randomness of a whole window, e.g. to freeze it for gradient checks."""
    noise_rng, dropout_rng = nx.split_rng(rng, 2)
    out = []
    shared = None
    for t in range(steps):
        r = draw_step(model, batch, noise_rng, dropout_rng, train)
        if model.dropout.per_sequence and train:
            if shared is None:
                shared = (r.masks, r.out_mask)
            r.masks, r.out_mask = shared
        out.append(r)
    return out


def model_step(
    model: NoisinModel, x_emb: Tensor, states: list[RnnState], rand: StepRandomness | None
) -> tuple[Tensor, list[RnnState]]:
    """Advance every layer one step; returns the readout state and the new layer states."""
    rand = rand or StepRandomness()
    layer_in = x_emb
    new_states = []
    for l, cell in enumerate(model.cells):
        m = rand.masks[l] if rand.masks is not None else None
        st = dropout_lstm_step(cell, m, layer_in, states[l]) if m is not None else cell_step(cell, layer_in, states[l])
        if rand.eps is not None and model.placement is Placement.ALL:
            st = RnnState(inject(model.noise, st.h, rand.eps[l]), st.c)
        new_states.append(st)
        layer_in = st.h
    readout = layer_in
    if rand.eps is not None and model.placement is Placement.READOUT:
        readout = inject(model.noise, readout, rand.eps[0])
    if rand.out_mask is not None:
        readout = nx.mul(readout, Tensor(rand.out_mask.astype(readout.dtype, copy=False)))
    return readout, new_states


# ---------------------------------------------------------------------------
# Objective


@dataclass
class ForwardResult:
    loss: Tensor                 # mean per-token negative log-likelihood
    token_nll: np.ndarray        # (T, B)
    final_states: list[RnnState]

    @property
    def step_losses(self) -> np.ndarray:
        return self.token_nll.mean(axis=1)

    @property
    def total(self) -> float:
        return float(self.token_nll.sum())

    @property
    def perplexity(self) -> float:
        return float(np.exp(self.loss.data))


def _rollout(
    model: NoisinModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    states: list[RnnState],
    rng: np.random.Generator | None,
    noise: list[StepRandomness] | None,
    train: bool,
) -> ForwardResult:
    T, B = inputs.shape[0], inputs.shape[1]
    needs_rng = model.noise.active or (train and (model.dropout.gates_active or model.dropout.output > 0))
    if noise is None and needs_rng:
        if rng is None:
            raise ValueError("a random generator is required for a stochastic forward pass")
        noise = draw_rollout(model, T, B, rng, train)
    step_losses = []
    for t in range(T):
        rand = noise[t] if noise is not None else None
        readout, states = model_step(model, model.embed(inputs[t]), states, rand)
        s = natural_param(model.head, readout)
        nx.check_finite(s, f"natural parameter at step {t}")
        step_losses.append(nll_rows(model.head.family, s, targets[t], model.head.sigma2))
    token_nll = np.stack([l.data for l in step_losses])
    total = step_losses[0]
    for l in step_losses[1:]:
        total = nx.add(total, l)
    loss = nx.scale(nx.sum_all(total), 1.0 / (T * B))
    return ForwardResult(loss, token_nll, [s.detach() for s in states])


def noisy_forward(
    model: NoisinModel,
    inputs,
    targets,
    states: list[RnnState] | None = None,
    rng: np.random.Generator | None = None,
    noise: list[StepRandomness] | None = None,
    train: bool = True,
) -> ForwardResult:
    """Monte Carlo estimate of the per-token noisy negative log-likelihood.

    ``inputs``/``targets`` are time-major: (T, B) token ids or (T, B, D)
    observation vectors.  With ``model.k > 1`` the loss averages ``k``
    rollouts driven by ``split_rng(rng, k)``; the carried state is the
    first rollout's.  ``noise`` replays pre-drawn randomness (single rollout).
    """
    inputs, targets = np.asarray(inputs), np.asarray(targets)
    if inputs.shape[0] < 1:
        raise ValueError("need at least one time step")
    B = inputs.shape[1]
    states = states if states is not None else model.zero_state(B)
    if model.k == 1 or noise is not None or not model.noise.active:
        return _rollout(model, inputs, targets, states, rng, noise, train)
    results = [_rollout(model, inputs, targets, states, r, None, train) for r in nx.split_rng(rng, model.k)]
    loss = results[0].loss
    for r in results[1:]:
        loss = nx.add(loss, r.loss)
    loss = nx.scale(loss, 1.0 / model.k)
    token_nll = np.mean([r.token_nll for r in results], axis=0)
    return ForwardResult(loss, token_nll, results[0].final_states)


def deterministic_forward(model: NoisinModel, inputs, targets, states=None) -> ForwardResult:
    return noisy_forward(model.deterministic(), inputs, targets, states, train=False)


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class UnbiasednessReport:
    z_scores: np.ndarray          # (layers, hidden)
    mean_deviation: np.ndarray    # (layers, hidden)
    n_samples: int
    threshold: float = 4.0

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))

    @property
    def biased(self) -> bool:
        return self.max_abs_z > self.threshold


def _replicate_state(st: RnnState, n: int) -> RnnState:
    h = Tensor(np.repeat(st.h.data, n, axis=0))
    c = None if st.c is None else Tensor(np.repeat(st.c.data, n, axis=0))
    return RnnState(h, c)


def check_unbiasedness(
    model: NoisinModel,
    x_prev,
    states: list[RnnState] | None,
    n_samples: int,
    rng: np.random.Generator,
    chunk: int | None = None,
    train: bool = True,
    threshold: float = 4.0,
) -> UnbiasednessReport:
    """Studentized deviation of the conditional mean state from the deterministic transition.

    Layer by layer, conditioned on the previous layer states and on one
    realized input from the layer below, draws ``n_samples`` stochastic
    transitions (noise and, when ``train``, dropout masks) and compares the
    Monte Carlo mean state with the noise-free transition output.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4 for a meaningful z-score")
    states = states if states is not None else model.zero_state(1)
    layer_in = model.embed(np.asarray(x_prev).reshape((1,) + np.shape(x_prev)))
    L = len(model.cells)
    zs, devs = [], []
    noise_rng, dropout_rng = nx.split_rng(rng, 2)
    d = model.dropout
    for l, cell in enumerate(model.cells):
        # about 2**22 gate preactivations per chunk keeps wide cells in memory
        rows = chunk or max(1024, 2**22 // (cell.n_gates * cell.hidden_size))
        f = cell_step(cell, layer_in, states[l]).h.data[0]
        inject_here = model.noise.active and (model.placement is Placement.ALL or l == L - 1)
        s1 = np.zeros_like(f)
        s2 = np.zeros_like(f)
        first = None
        done = 0
        while done < n_samples:
            n = min(rows, n_samples - done)
            xin = Tensor(np.repeat(layer_in.data, n, axis=0))
            st = _replicate_state(states[l], n)
            if train and d.gates_active:
                masks = sample_dropout_masks(n, cell.hidden_size, 1 - d.input, 1 - d.recurrent, dropout_rng)
                z = dropout_lstm_step(cell, masks, xin, st).h
            else:
                z = cell_step(cell, xin, st).h
            if inject_here:
                eps = sample_injection(model.noise, z.shape, noise_rng)
                z = inject(model.noise, z, eps)
            dz = z.data - f
            s1 += dz.sum(axis=0)
            s2 += (dz * dz).sum(axis=0)
            if first is None:
                first = z.data[:1]
            done += n
        mean = s1 / n_samples
        var = np.maximum(s2 / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
        se = np.sqrt(var / n_samples)
        with np.errstate(divide="ignore", invalid="ignore"):
            z_score = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.where(np.abs(mean) > 1e-14, np.inf, 0.0))
        zs.append(z_score)
        devs.append(mean)
        layer_in = Tensor(first)
    return UnbiasednessReport(np.array(zs), np.array(devs), n_samples, threshold)


@dataclass
class JensenGap:
    bound: float            # mean over rollouts of log p(x | z)
    log_mean: float         # log of the mean likelihood
    gap: float
    logliks: np.ndarray


def jensen_gap_from_logliks(logliks) -> JensenGap:
    ll = np.asarray(logliks, dtype=np.float64)
    if ll.size < 2:
        raise ValueError("the Jensen gap needs at least two rollouts")
    m = float(np.max(ll))
    d = ll - m
    bound = m + float(np.mean(d))
    log_mean = m + float(np.log(np.mean(np.exp(d))))
    return JensenGap(bound, log_mean, log_mean - bound, ll)


def jensen_gap(
    model: NoisinModel, inputs, targets, k: int, rng: np.random.Generator, states=None, train: bool = False
) -> JensenGap:
    """Compare the noisy objective with the log marginal likelihood estimate over ``k`` rollouts.

    Base-measure terms are dropped from both sides; they cancel in the gap.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    inputs, targets = np.asarray(inputs), np.asarray(targets)
    states = states if states is not None else model.zero_state(inputs.shape[1])
    logliks = [
        -_rollout(model, inputs, targets, states, r, None, train).total for r in nx.split_rng(rng, k)
    ]
    return jensen_gap_from_logliks(logliks)


# ---------------------------------------------------------------------------
# Training


class SGD:
    """Plain SGD with optional iterate averaging (ASGD)."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.avg: dict[str, np.ndarray] | None = None
        self.n_avg = 0

    def start_averaging(self) -> None:
        self.avg = {k: p.data.copy() for k, p in self.params.items()}
        self.n_avg = 1

    @property
    def averaging(self) -> bool:
        return self.avg is not None

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = p.data - self.lr * grads[k].astype(p.data.dtype, copy=False)
        if self.avg is not None:
            self.n_avg += 1
            for k, p in self.params.items():
                self.avg[k] += (p.data - self.avg[k]) / self.n_avg

    def swap_average(self) -> None:
        """Exchange live parameters with the running average (call twice to undo)."""
        if self.avg is None:
            return
        for k, p in self.params.items():
            p.data, self.avg[k] = self.avg[k], p.data


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    clipped: bool
    states: list[RnnState]


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float | None) -> tuple[dict[str, np.ndarray], float, bool]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if clip_norm is None or clip_norm <= 0 or norm <= clip_norm:
        return grads, norm, False
    c = clip_norm / norm
    return {k: g * c for k, g in grads.items()}, norm, True


def train_step(
    model: NoisinModel,
    batch: tuple[np.ndarray, np.ndarray],
    states: list[RnnState] | None,
    optimizer: SGD,
    clip_norm: float | None,
    rng: np.random.Generator,
) -> StepResult:
    """One noisy forward, backward, global-norm clip and SGD update.

    The returned states are detached, so the next window does not
    backpropagate into this one.
    """
    inputs, targets = batch
    params = model.parameters()
    names = list(params)
    with nx.Tape() as tape:
        res = noisy_forward(model, inputs, targets, states, rng=rng, train=True)
    loss = float(res.loss.data)
    if not np.isfinite(loss):
        raise NumericalError(f"training loss is not finite ({loss})")
    raw = tape.gradient(res.loss, [params[n] for n in names])
    grads, norm, clipped = clip_gradients(dict(zip(names, raw)), clip_norm)
    if not np.isfinite(norm):
        raise NumericalError("gradient norm is not finite")
    optimizer.step(grads)
    return StepResult(loss, norm, clipped, res.final_states)


__all__ = [
    "Placement",
    "DropoutConfig",
    "NoisinModel",
    "build_model",
    "inject",
    "StepRandomness",
    "draw_step",
    "draw_rollout",
    "model_step",
    "ForwardResult",
    "noisy_forward",
    "deterministic_forward",
    "UnbiasednessReport",
    "check_unbiasedness",
    "JensenGap",
    "jensen_gap",
    "jensen_gap_from_logliks",
    "SGD",
    "StepResult",
    "clip_gradients",
    "train_step",
    "CellKind",
]
