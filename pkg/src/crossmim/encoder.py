"""Shared transformer trunk with sparse top-1 mixture-of-experts blocks.

Every sensor's token sequence passes through one parameter set: pre-norm
blocks `x += attention(ln(x))` then `x += feedforward(ln(x))`, where the
feed-forward of selected blocks is a gated bank of experts.  Each token is
routed to its argmax expert, subject to a per-expert capacity; overflow
tokens skip the expert entirely and ride the residual connection.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError


def every_other_block(depth):
    return tuple(range(1, depth, 2))


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 8
    width: int = 64
    heads: int = 4
    moe_block_indices: tuple = None  # None -> every other block
    num_experts: int = 8
    top_k: int = 1
    capacity_factor: float = 1.25
    aux_weight: float = 0.01
    ffn_mult: int = 4

    def __post_init__(self):
        if self.moe_block_indices is None:
            object.__setattr__(self, "moe_block_indices", every_other_block(self.depth))
        object.__setattr__(self, "moe_block_indices", tuple(sorted(self.moe_block_indices)))
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if any(not 0 <= i < self.depth for i in self.moe_block_indices):
            raise ConfigError(f"moe_block_indices {self.moe_block_indices} outside [0, {self.depth})")
        if self.top_k != 1:
            raise ConfigError(f"only top-1 routing is supported, got top_k={self.top_k}")
        if self.capacity_factor < 1.0:
            raise ConfigError(f"capacity_factor must be >= 1, got {self.capacity_factor}")
        if self.num_experts < 1 and self.moe_block_indices:
            raise ConfigError("MoE blocks configured with zero experts")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def ffn_hidden(self):
        return self.ffn_mult * self.width


@dataclass(frozen=True)
class RoutingReport:
    """Per-MoE-layer dispatch accounting for one forward pass."""

    block_index: int
    expert_counts: tuple  # tokens actually processed per expert
    mean_gate_prob: tuple  # mean gate probability per expert over all tokens
    dropped: int
    aux_loss: float

    def as_record(self):
        return {
            "block": self.block_index,
            "counts": list(self.expert_counts),
            "mean_gate_prob": [round(p, 6) for p in self.mean_gate_prob],
            "dropped": self.dropped,
            "aux_loss": self.aux_loss,
        }


def expert_capacity(n_tokens, num_experts, capacity_factor):
    return max(1, int(math.floor(capacity_factor * n_tokens / num_experts)))


def _row(bias):
    return T.reshape(bias, (1, -1))


def _ffn(x, w1, b1, w2, b2):
    return T.gelu(x @ w1 + _row(b1)) @ w2 + _row(b2)


def attention(x, p, heads):
    """Standard multi-head self-attention over an (L, width) sequence."""
    n, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def heads_first(t):
        return T.transpose(T.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = heads_first(x @ p["wq"] + _row(p["bq"]))
    k = heads_first(x @ p["wk"] + _row(p["bk"]))
    v = heads_first(x @ p["wv"] + _row(p["bv"]))
    weights = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * scale, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (1, 0, 2)), (n, d))
    return ctx @ p["wo"] + _row(p["bo"])


def moe_forward(x, gate_w, experts, capacity_factor=1.25):
    """Route each token of x (T, width) to its argmax expert.

    experts: list of parameter dicts with keys w1/b1/w2/b2.  Returns the
    combined output (zeros where a token was dropped), the balance loss as
    a tape scalar, and a RoutingReport.

    The balance loss is num_experts * sum_e f_e * P_e, where f_e is the
    pre-drop fraction of tokens assigned to expert e (a constant) and P_e
    the mean gate probability of e over all tokens (differentiable).
    """
    num_experts = len(experts)
    if num_experts == 0:
        raise ConfigError("moe_forward needs at least one expert")
    n_tokens = x.shape[0]
    if n_tokens < 1:
        raise ShapeError("moe_forward needs at least one token")

    probs = T.softmax(x @ gate_w, axis=-1)  # (T, E)
    assign = np.argmax(probs.data, axis=1)  # ties already break to lowest index
    capacity = expert_capacity(n_tokens, num_experts, capacity_factor)

    combined = None
    kept_counts = []
    dropped = 0
    for e in range(num_experts):
        idx = np.flatnonzero(assign == e)
        kept = idx[:capacity]  # overflow dropped in arrival order
        dropped += len(idx) - len(kept)
        kept_counts.append(len(kept))
        if len(kept) == 0:
            continue
        xe = T.take_rows(x, kept)
        ye = _ffn(xe, experts[e]["w1"], experts[e]["b1"], experts[e]["w2"], experts[e]["b2"])
        onehot = np.zeros((num_experts, 1), dtype=probs.data.dtype)
        onehot[e, 0] = 1.0
        gate = T.take_rows(probs, kept) @ T.constant(onehot, like=probs)  # (k, 1)
        part = T.put_rows(kept, ye * gate, n_tokens)
        combined = part if combined is None else combined + part
    if combined is None:  # every token dropped: impossible with capacity >= 1, kept for safety
        combined = x * T.constant(0.0, like=x)

    fractions = np.bincount(assign, minlength=num_experts) / float(n_tokens)
    mean_prob = T.reduce_mean(probs, axis=0)  # (E,)
    aux = T.reduce_sum(mean_prob * T.constant(fractions, like=probs)) * float(num_experts)

    report = RoutingReport(
        block_index=-1,
        expert_counts=tuple(kept_counts),
        mean_gate_prob=tuple(float(v) for v in mean_prob.data),
        dropped=int(dropped),
        aux_loss=float(aux.data),
    )
    return combined, aux, report


def _check_finite(x, block_index, stage):
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NumericError(
            f"non-finite activations in block {block_index} after {stage}",
            diagnostics={"block": block_index, "stage": stage, "bad_values": bad},
        )


def encode(tokens, config, params, prefix="encoder."):
    """Run the shared trunk over one (L, width) token sequence.

    Returns (features, aux_loss, reports): aux_loss is the tape scalar sum
    of balance losses over MoE blocks (a zero constant when there are none),
    reports one RoutingReport per MoE block.
    """
    if tokens.ndim != 2 or tokens.shape[1] != config.width:
        raise ShapeError(f"encode expects (L, {config.width}) tokens, got {tuple(tokens.shape)}")
    x = tokens
    aux_total = T.constant(np.zeros((), dtype=tokens.dtype))
    reports = []
    for k in range(config.depth):
        b = f"{prefix}block{k}."
        attn_params = {key: params[b + "attn." + key]
                       for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        x = x + attention(T.layer_norm(x, params[b + "ln1.gamma"], params[b + "ln1.beta"]),
                          attn_params, config.heads)
        _check_finite(x, k, "attention")
        h = T.layer_norm(x, params[b + "ln2.gamma"], params[b + "ln2.beta"])
        if k in config.moe_block_indices:
            experts = [{key: params[f"{b}expert{e}.{key}"] for key in ("w1", "b1", "w2", "b2")}
                       for e in range(config.num_experts)]
            y, aux, report = moe_forward(h, params[b + "gate.w"], experts, config.capacity_factor)
            aux_total = aux_total + aux
            reports.append(RoutingReport(
                block_index=k,
                expert_counts=report.expert_counts,
                mean_gate_prob=report.mean_gate_prob,
                dropped=report.dropped,
                aux_loss=report.aux_loss,
            ))
        else:
            y = _ffn(h, params[b + "ffn.w1"], params[b + "ffn.b1"],
                     params[b + "ffn.w2"], params[b + "ffn.b2"])
        x = x + y
        _check_finite(x, k, "feedforward")
    return x, aux_total, reports
