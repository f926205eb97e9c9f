"""Cascade next-node model.

A GRU encodes the sequence of infected nodes; scaled dot-product attention
weights the history against the current state; a bank of prototype vectors
splits each position softly across K latent factors (cosine similarity,
optionally sharpened with Gumbel noise during training); the doubly-weighted,
layer-normalized sums give K candidate states per step, and candidates are
scored against the shared node-embedding table with a max-over-factors
softmax loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Parameter, RngState, Tensor


class DegenerateCascadeError(Exception):
    """Cascade too short to yield a prediction point (length < 2)."""


@dataclass
class GumbelConfig:
    """Where and how factor-assignment noise is injected during training."""

    tau: float = 1.0
    enabled_in_training: bool = True
    rng: Optional[RngState] = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class ModelParams:
    """All trainable state plus the shape hyperparameters.

    ``embeddings`` has ``num_nodes + 1`` rows: the extra final row is the
    padding slot, which never appears in candidate scoring.
    """

    num_nodes: int
    dim: int
    factors: int
    embeddings: Parameter
    w_z: Parameter
    u_z: Parameter
    b_z: Parameter
    w_r: Parameter
    u_r: Parameter
    b_r: Parameter
    w_h: Parameter
    u_h: Parameter
    b_h: Parameter
    prototypes: Parameter
    ln_gain: Parameter
    ln_bias: Parameter

    @property
    def pad_index(self) -> int:
        return self.num_nodes

    def named_parameters(self):
        return [
            ("embeddings", self.embeddings),
            ("w_z", self.w_z), ("u_z", self.u_z), ("b_z", self.b_z),
            ("w_r", self.w_r), ("u_r", self.u_r), ("b_r", self.b_r),
            ("w_h", self.w_h), ("u_h", self.u_h), ("b_h", self.b_h),
            ("prototypes", self.prototypes),
            ("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias),
        ]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def reset_gradients(self) -> None:
        for p in self.parameters():
            p.reset_gradient()

    def clone(self) -> "ModelParams":
        kwargs = dict(num_nodes=self.num_nodes, dim=self.dim, factors=self.factors)
        for name, p in self.named_parameters():
            kwargs[name] = Parameter(p.data.copy(), name=name)
        return ModelParams(**kwargs)


def init_params(num_nodes: int, dim: int, factors: int, rng: RngState) -> ModelParams:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) init; prototypes are resampled until
    pairwise |cos| <= 0.99 so factor assignments start informative."""
    if num_nodes < 1:
        raise ValueError(f"need at least one node, got {num_nodes}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if factors < 1:
        raise ValueError(f"factors must be >= 1, got {factors}")
    bound = 1.0 / math.sqrt(dim)

    def uni(*shape):
        return rng.uniform_between(-bound, bound, shape)

    # prototypes are drawn last so that models differing only in K share
    # bit-identical embedding/GRU/layer-norm initializations per seed
    embeddings = uni(num_nodes + 1, dim)
    gru = {name: uni(dim, dim) for name in ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h")}
    biases = {name: uni(dim) for name in ("b_z", "b_r", "b_h")}

    protos = uni(factors, dim)
    for _ in range(100):
        unit = protos / np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), nm.NORM_FLOOR)
        cos = unit @ unit.T
        np.fill_diagonal(cos, 0.0)
        bad = np.argwhere(np.abs(cos) > 0.99)
        if bad.size == 0:
            break
        protos[bad[0][0]] = uni(dim)

    return ModelParams(
        num_nodes=num_nodes,
        dim=dim,
        factors=factors,
        embeddings=Parameter(embeddings, "embeddings"),
        w_z=Parameter(gru["w_z"], "w_z"),
        u_z=Parameter(gru["u_z"], "u_z"),
        b_z=Parameter(biases["b_z"], "b_z"),
        w_r=Parameter(gru["w_r"], "w_r"),
        u_r=Parameter(gru["u_r"], "u_r"),
        b_r=Parameter(biases["b_r"], "b_r"),
        w_h=Parameter(gru["w_h"], "w_h"),
        u_h=Parameter(gru["u_h"], "u_h"),
        b_h=Parameter(biases["b_h"], "b_h"),
        prototypes=Parameter(protos, "prototypes"),
        ln_gain=Parameter(np.ones(dim), "ln_gain"),
        ln_bias=Parameter(np.zeros(dim), "ln_bias"),
    )


# ---------------------------------------------------------------------------
# single-step operations (also the oracle path for the fused forward below)


def _gru_cell(params: ModelParams, h_prev, x) -> Tensor:
    """One recurrence: update gate z, reset gate r, candidate state, blend.

    h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)
    """
    z = nm.sigmoid(nm.add(nm.add(nm.matmul(x, params.w_z), nm.matmul(h_prev, params.u_z)), params.b_z))
    r = nm.sigmoid(nm.add(nm.add(nm.matmul(x, params.w_r), nm.matmul(h_prev, params.u_r)), params.b_r))
    cand = nm.tanh(nm.add(nm.add(nm.matmul(x, params.w_h), nm.matmul(nm.mul(r, h_prev), params.u_h)), params.b_h))
    return nm.add(nm.mul(nm.sub(1.0, z), h_prev), nm.mul(z, cand))


def gru_step(params: ModelParams, h_prev, node_index: int) -> Tensor:
    """Advance the hidden state by one infected node."""
    idx = int(node_index)
    if not 0 <= idx < params.num_nodes:
        raise ValueError(f"node index {idx} out of range [0, {params.num_nodes})")
    return _gru_cell(params, h_prev, nm.pick(params.embeddings, idx))


def encode_sequence(params: ModelParams, indices: Sequence[int]) -> Tensor:
    """Run the GRU over a node sequence; returns the (t, D) stack of states."""
    h = np.zeros(params.dim)
    states = []
    for idx in indices:
        h = gru_step(params, h, idx)
        states.append(h)
    return nm.stack_rows(states)


def sequential_attention(hidden: Tensor) -> Tensor:
    """Weights over the history: softmax_i of h_i . h_t / sqrt(D), i = 1..t.

    The current position attends to itself as well.
    """
    t, d = _data_shape(hidden)
    if t < 1:
        raise ValueError("sequential_attention needs at least one hidden state")
    scores = nm.matmul(hidden, nm.pick(hidden, t - 1))
    return nm.softmax_rows(scores, scale=1.0 / math.sqrt(d))


def disentangled_attention(
    hidden: Tensor,
    params: ModelParams,
    gumbel: Optional[GumbelConfig] = None,
    training: bool = False,
) -> Tensor:
    """Per-position factor weights: softmax_k of cos(h_i, p_k) / sqrt(D).

    During training with Gumbel enabled, the softmax is replaced by a soft
    Gumbel-softmax sample on the same logits (temperature ``gumbel.tau``);
    evaluation always uses the deterministic softmax.
    """
    scale = 1.0 / math.sqrt(params.dim)
    cos = nm.dot_rows(nm.unit_rows(hidden), nm.unit_rows(params.prototypes))
    if training and gumbel is not None and gumbel.enabled_in_training:
        if gumbel.rng is None:
            raise ValueError("gumbel noise requested but no rng given")
        noisy = nm.add(nm.mul(cos, scale), nm.gumbel_noise(cos.shape, gumbel.rng))
        return nm.softmax_rows(noisy, scale=1.0 / gumbel.tau)
    return nm.softmax_rows(cos, scale=scale)


def aggregate(hidden: Tensor, alpha: Tensor, beta: Tensor, params: ModelParams) -> Tensor:
    """K layer-normalized states: y_k = LN(sum_i alpha_i * beta_ik * h_i)."""
    t, _ = _data_shape(hidden)
    if alpha.shape != (t,) or beta.shape[0] != t:
        raise ValueError(
            f"shape mismatch: hidden {hidden.shape}, alpha {alpha.shape}, beta {beta.shape}"
        )
    mixed = nm.weighted_mix(nm.reshape(alpha, (1, t)), beta, hidden)
    ys = nm.reshape(mixed, (beta.shape[1], params.dim))
    return nm.layer_norm_rows(ys, params.ln_gain, params.ln_bias)


def score_candidates(ys: Tensor, params: ModelParams) -> Tensor:
    """score_v = max_k x_v . y_k / sqrt(D) over the real (non-pad) nodes.

    The embedding table is tied: the same rows encode inputs and score
    candidates.
    """
    real = nm.gather_rows(params.embeddings, np.arange(params.num_nodes))
    scores = nm.mul(nm.dot_rows(ys, real), 1.0 / math.sqrt(params.dim))
    return nm.max_over_axis(scores, axis=0)


def step_loss(ys: Tensor, target_node: int, params: ModelParams) -> Tensor:
    """-log softmax(scores)[target]; gradient flows through the argmax factor."""
    tgt = int(target_node)
    if not 0 <= tgt < params.num_nodes:
        raise ValueError(f"target node {tgt} out of range [0, {params.num_nodes})")
    scores = score_candidates(ys, params)
    return nm.sub(nm.logsumexp(scores), nm.pick(scores, tgt))


# ---------------------------------------------------------------------------
# fused whole-cascade forward


@dataclass
class CascadeForward:
    """Result of one cascade pass: loss graph root plus detached views."""

    loss: Tensor                 # scalar, sum of per-step losses
    step_losses: np.ndarray      # (t,)
    states: np.ndarray           # (t, K, D) layer-normalized factor states
    scores: np.ndarray           # (t, N) candidate scores per prediction point


_TRIL_CACHE: dict = {}


def _tril(t: int) -> np.ndarray:
    mask = _TRIL_CACHE.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        _TRIL_CACHE[t] = mask
    return mask


def _data_shape(x):
    return (x.data.shape if isinstance(x, Tensor) else np.asarray(x).shape)


def _forward_positions(
    params: ModelParams,
    positions: np.ndarray,
    gumbel: Optional[GumbelConfig],
    training: bool,
    dropout_rate: float,
    dropout_rng: Optional[RngState],
):
    """All prefixes of ``positions`` in one pass.

    Row t of the returned score tensor belongs to the prefix of length t+1.
    Factor weights are computed once per position (they do not depend on the
    prefix length), and attention rows are masked to i <= t.
    """
    t_total = len(positions)
    d = params.dim
    scale = 1.0 / math.sqrt(d)

    xe = nm.gather_rows(params.embeddings, positions)
    if training and dropout_rate > 0.0:
        if dropout_rng is None:
            raise ValueError("dropout requested but no rng given")
        keep = (dropout_rng.uniform((t_total, d)) >= dropout_rate) / (1.0 - dropout_rate)
        xe = nm.mul(xe, keep)

    # input transforms for every step at once; the recurrence stays sequential
    a_z = nm.add(nm.matmul(xe, params.w_z), params.b_z)
    a_r = nm.add(nm.matmul(xe, params.w_r), params.b_r)
    a_h = nm.add(nm.matmul(xe, params.w_h), params.b_h)

    h = np.zeros(d)
    states = []
    for t in range(t_total):
        z = nm.sigmoid(nm.gate_preact(a_z, t, h, params.u_z))
        r = nm.sigmoid(nm.gate_preact(a_r, t, h, params.u_r))
        cand = nm.tanh(nm.gate_preact(a_h, t, nm.mul(r, h), params.u_h))
        h = nm.gru_blend(z, h, cand)
        states.append(h)
    hidden = nm.stack_rows(states)

    attn = nm.softmax_rows(nm.dot_rows(hidden, hidden), mask=_tril(t_total), scale=scale)

    cos = nm.dot_rows(nm.unit_rows(hidden), nm.unit_rows(params.prototypes))
    if training and gumbel is not None and gumbel.enabled_in_training:
        if gumbel.rng is None:
            raise ValueError("gumbel noise requested but no rng given")
        noisy = nm.add(nm.mul(cos, scale), nm.gumbel_noise(cos.shape, gumbel.rng))
        factors = nm.softmax_rows(noisy, scale=1.0 / gumbel.tau)
    else:
        factors = nm.softmax_rows(cos, scale=scale)

    mixed = nm.weighted_mix(attn, factors, hidden)
    ys = nm.layer_norm_rows(mixed, params.ln_gain, params.ln_bias)

    real = nm.gather_rows(params.embeddings, np.arange(params.num_nodes))
    per_factor = nm.mul(nm.dot_rows(ys, real), scale)   # (t, K, N)
    scores = nm.max_over_axis(per_factor, axis=1)       # (t, N)
    return ys, scores


def _check_indices(params: ModelParams, indices: np.ndarray) -> None:
    if indices.size and (indices.min() < 0 or indices.max() >= params.num_nodes):
        raise ValueError(
            f"cascade contains node index outside [0, {params.num_nodes})"
        )


def forward_cascade(
    params: ModelParams,
    cascade: Sequence[int],
    gumbel: Optional[GumbelConfig] = None,
    training: bool = False,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[RngState] = None,
) -> CascadeForward:
    """Loss over every prediction point of one cascade.

    For each prefix length t = 1..len-1 the model is asked for node t+1; the
    returned loss is the sum of the per-step losses.  Raises
    DegenerateCascadeError for cascades with no prediction point.
    """
    idx = np.asarray(cascade, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("cascade must be a flat sequence of node indices")
    if len(idx) < 2:
        raise DegenerateCascadeError(f"cascade of length {len(idx)} has no prediction point")
    _check_indices(params, idx)

    ys, scores = _forward_positions(
        params, idx[:-1], gumbel, training, dropout_rate, dropout_rng
    )
    targets = idx[1:]
    steps = nm.sub(nm.logsumexp(scores), nm.take_per_row(scores, targets))
    loss = nm.sum_all(steps)
    return CascadeForward(
        loss=loss,
        step_losses=steps.data.copy(),
        states=ys.data.copy(),
        scores=scores.data.copy(),
    )


def prefix_scores(params: ModelParams, prefix: Sequence[int]) -> np.ndarray:
    """Evaluation-mode candidate scores for every prefix of ``prefix``.

    Row t scores the next node after the first t+1 entries.
    """
    idx = np.asarray(prefix, dtype=np.intp)
    if len(idx) < 1:
        raise ValueError("prefix must contain at least one node")
    _check_indices(params, idx)
    _, scores = _forward_positions(params, idx, None, False, 0.0, None)
    return scores.data.copy()


def predict_topn(params: ModelParams, prefix: Sequence[int], n: int) -> np.ndarray:
    """Top-n candidate nodes after ``prefix``, ties broken by ascending index."""
    if n < 0 or n > params.num_nodes:
        raise ValueError(f"n must be in [0, {params.num_nodes}], got {n}")
    scores = prefix_scores(params, prefix)[-1]
    order = np.argsort(-scores, kind="stable")
    return order[:n]


# ---------------------------------------------------------------------------
# checkpoint format
#
# Single self-describing binary file: magic, uint64 header length, a JSON
# header (shapes + hyperparameters + rng seed), then raw little-endian
# float64 blobs in header order.  Writing the same model twice produces
# byte-identical files; a read-back round-trips bit-exactly.

_CKPT_MAGIC = b"CASDIS1\n"


def save_checkpoint(path, params: ModelParams, seed: int) -> None:
    tensors = [
        {"name": name, "shape": list(p.data.shape)}
        for name, p in params.named_parameters()
    ]
    header = json.dumps(
        {
            "num_nodes": params.num_nodes,
            "dim": params.dim,
            "factors": params.factors,
            "seed": int(seed),
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, p in params.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back; returns (ModelParams, seed)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a casdis checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        kwargs = dict(
            num_nodes=header["num_nodes"],
            dim=header["dim"],
            factors=header["factors"],
        )
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            value = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            kwargs[spec["name"]] = Parameter(value.copy(), name=spec["name"])
    return ModelParams(**kwargs), header["seed"]
