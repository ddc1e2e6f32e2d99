"""Fine-grained mixture-of-experts feed-forward layer.

A layer holds ``n_shared`` always-on experts plus ``n_routed`` experts of
which ``top_k`` are selected per token by a learned router.  Dispatch is
dropless: every selected (token, expert) pair is evaluated, no capacity
limit.  Auxiliary losses (group-relaxed balance loss, router z-loss) and a
binary routing-trace format live here too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import FeedForward, flatten_parameters, init_weight
from .tensor import (
    ShapeError, Tensor, gather_rows, logsumexp, matmul, mean, power,
    scale_rows, scatter_rows, softmax, sum_, take_pairs,
)

MODALITY_TEXT = 0
MODALITY_VISUAL = 1

_TRACE_MAGIC = b"FMTR"
_TRACE_VERSION = 1


@dataclass(frozen=True)
class MoEConfig:
    hidden_dim: int
    n_routed: int = 64
    n_shared: int = 2
    top_k: int = 6
    expert_ffn_dim: int = 1664
    group_size: int = 8
    gated: bool = True

    def __post_init__(self):
        if min(self.hidden_dim, self.n_routed, self.top_k,
               self.expert_ffn_dim, self.group_size) <= 0 or self.n_shared < 0:
            raise ValueError("MoEConfig sizes must be positive (n_shared >= 0)")
        if self.top_k > self.n_routed:
            raise ValueError(
                f"top_k {self.top_k} exceeds n_routed {self.n_routed}")
        if self.n_routed % self.group_size != 0:
            raise ValueError(
                f"n_routed {self.n_routed} not divisible by "
                f"group_size {self.group_size}")

    @property
    def n_groups(self) -> int:
        return self.n_routed // self.group_size


@dataclass
class RoutingRecord:
    """Routing outcome for one layer over a batch of tokens.

    Numpy fields are detached snapshots (what gets traced to disk); the
    ``*_tensor`` fields stay on the autodiff tape so the combination
    weights and auxiliary losses receive gradients.
    """

    layer_index: int
    selected_experts: np.ndarray      # [T, top_k] int32
    selection_weights: np.ndarray     # [T, top_k]
    full_probs: np.ndarray            # [T, n_routed]
    modality: np.ndarray              # [T] uint8, MODALITY_TEXT/VISUAL
    probs_tensor: Tensor | None = None
    weights_tensor: Tensor | None = None
    logits_tensor: Tensor | None = None

    @property
    def n_tokens(self) -> int:
        return self.selected_experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.selected_experts.shape[1]

    @property
    def n_routed(self) -> int:
        return self.full_probs.shape[1]


@dataclass
class AuxLossReport:
    balance_loss: float
    z_loss: float
    f_g: np.ndarray
    p_g: np.ndarray


def route(router_logits: Tensor, config: MoEConfig, layer_index: int = 0,
          modality=None) -> RoutingRecord:
    """Softmax over routed experts, then keep the top_k by probability.

    Ties break toward the lower expert index (stable sort on descending
    probability).  Selection weights are the chosen probabilities
    renormalized to sum to 1.
    """
    if router_logits.data.ndim != 2 or router_logits.shape[1] != config.n_routed:
        raise ShapeError(
            f"route expects [T, {config.n_routed}] logits, got {router_logits.shape}")
    t = router_logits.shape[0]
    probs = softmax(router_logits, axis=1)
    order = np.argsort(-probs.data, axis=1, kind="stable")
    selected = order[:, :config.top_k].astype(np.int32)

    rows = np.repeat(np.arange(t), config.top_k)
    cols = selected.reshape(-1)
    chosen = take_pairs(probs, rows, cols)                    # [T*k]
    chosen = chosen.reshape((t, config.top_k))
    norm = sum_(chosen, axis=1)                               # [T]
    weights = scale_rows(chosen, power(norm, -1.0))           # rows sum to 1

    if modality is None:
        mod = np.zeros(t, dtype=np.uint8)
    else:
        mod = np.asarray(modality, dtype=np.uint8)
        if mod.shape != (t,):
            raise ShapeError(f"modality must have one entry per token, got {mod.shape}")
    return RoutingRecord(
        layer_index=layer_index,
        selected_experts=selected,
        selection_weights=weights.data.copy(),
        full_probs=probs.data.copy(),
        modality=mod,
        probs_tensor=probs,
        weights_tensor=weights,
        logits_tensor=router_logits,
    )


class MoELayer:
    """Router + shared/routed expert bank with dropless dispatch."""

    def __init__(self, rng: np.random.Generator, config: MoEConfig):
        self.config = config
        d, e = config.hidden_dim, config.expert_ffn_dim
        self.router = init_weight(rng, d, config.n_routed)
        self.shared = [FeedForward(rng, d, e, d, gated=config.gated)
                       for _ in range(config.n_shared)]
        # Routed experts see batches whose composition depends on routing;
        # row-stable matmul keeps each token's result independent of its
        # batch mates, preserving bitwise causality end to end.
        self.experts = [FeedForward(rng, d, e, d, gated=config.gated,
                                    row_stable=True)
                        for _ in range(config.n_routed)]

    def __call__(self, hidden: Tensor, layer_index: int = 0,
                 modality=None) -> tuple[Tensor, RoutingRecord]:
        cfg = self.config
        if hidden.data.ndim != 2 or hidden.shape[1] != cfg.hidden_dim:
            raise ShapeError(
                f"moe layer expects [T, {cfg.hidden_dim}], got {hidden.shape}")
        t = hidden.shape[0]
        record = route(matmul(hidden, self.router), cfg, layer_index, modality)

        out = None
        for expert in self.shared:
            y = expert(hidden)
            out = y if out is None else out + y

        # Group the (token, slot) assignments by expert and evaluate each
        # expert once on its gathered rows.
        sel = record.selected_experts
        for e in range(cfg.n_routed):
            tok_idx, slot_idx = np.nonzero(sel == e)
            if tok_idx.size == 0:
                continue
            w = take_pairs(record.weights_tensor, tok_idx, slot_idx)
            y = scale_rows(self.experts[e](gather_rows(hidden, tok_idx)), w)
            y = scatter_rows(y, tok_idx, t)
            out = y if out is None else out + y
        if out is None:                       # n_shared == 0 and nothing routed
            out = hidden * Tensor(0.0)
        return out, record

    def parameters(self) -> dict[str, Tensor]:
        params = {"router": self.router}
        params.update(flatten_parameters(
            "", [(f"shared.{i}", x) for i, x in enumerate(self.shared)]))
        params.update(flatten_parameters(
            "", [(f"expert.{i}", x) for i, x in enumerate(self.experts)]))
        return params


def load_balance_loss(record: RoutingRecord,
                      config: MoEConfig) -> tuple[Tensor, AuxLossReport]:
    """Group-relaxed balance loss G * sum_g f_g * P_g.

    f_g is the fraction of all top-k assignments landing in group g (a
    count, treated as constant); P_g is the mean routed-probability mass
    on group g and carries gradient back to the router.
    """
    if record.n_tokens == 0:
        raise ValueError("load_balance_loss: empty routing record")
    if record.probs_tensor is None:
        raise ValueError("load_balance_loss needs a live record (probs_tensor)")
    g_count = config.n_groups
    groups = record.selected_experts // config.group_size
    f = np.bincount(groups.reshape(-1), minlength=g_count).astype(np.float64)
    f /= record.n_tokens * record.top_k

    indicator = np.zeros((config.n_routed, g_count))
    indicator[np.arange(config.n_routed), np.arange(config.n_routed) // config.group_size] = 1.0
    p = mean(matmul(record.probs_tensor, Tensor(indicator)), axis=0)   # [G]
    loss = sum_(p * Tensor(f)) * Tensor(float(g_count))

    z = float("nan")
    if record.logits_tensor is not None:
        z = z_loss(record.logits_tensor.detach()).item()
    report = AuxLossReport(balance_loss=loss.item(), z_loss=z,
                           f_g=f, p_g=p.data.copy())
    return loss, report


def z_loss(router_logits: Tensor) -> Tensor:
    """Mean over tokens of the squared log-partition of the router logits."""
    if router_logits.data.ndim != 2 or router_logits.shape[0] == 0:
        raise ValueError("z_loss expects a nonempty [T, n_routed] batch")
    return mean(power(logsumexp(router_logits, axis=1), 2.0))


# -- routing trace files ---------------------------------------------------

class RoutingTraceWriter:
    """Appends RoutingRecords to a binary trace file (magic ``FMTR``)."""

    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(_TRACE_MAGIC + struct.pack("<I", _TRACE_VERSION))

    def add(self, record: RoutingRecord) -> None:
        t, k, n = record.n_tokens, record.top_k, record.n_routed
        self._fh.write(struct.pack("<iIII", record.layer_index, t, k, n))
        self._fh.write(record.modality.astype(np.uint8).tobytes())
        self._fh.write(record.selected_experts.astype("<i4").tobytes())
        self._fh.write(record.selection_weights.astype("<f8").tobytes())
        self._fh.write(record.full_probs.astype("<f8").tobytes())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[RoutingRecord]:
    """Read back every record written by RoutingTraceWriter."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TRACE_MAGIC:
        raise ValueError(f"{path}: not a routing trace file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {version}")
    records, off = [], 8
    while off < len(blob):
        layer, t, k, n = struct.unpack_from("<iIII", blob, off)
        off += 16
        mod = np.frombuffer(blob, dtype=np.uint8, count=t, offset=off).copy()
        off += t
        sel = np.frombuffer(blob, dtype="<i4", count=t * k, offset=off)
        sel = sel.reshape(t, k).astype(np.int32)
        off += 4 * t * k
        w = np.frombuffer(blob, dtype="<f8", count=t * k, offset=off)
        w = w.reshape(t, k).copy()
        off += 8 * t * k
        p = np.frombuffer(blob, dtype="<f8", count=t * n, offset=off)
        p = p.reshape(t, n).copy()
        off += 8 * t * n
        records.append(RoutingRecord(
            layer_index=layer, selected_experts=sel, selection_weights=w,
            full_probs=p, modality=mod))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in trace file")
    return records
