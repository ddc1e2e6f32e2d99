"""Causal MoE transformer decoder.

Pre-norm blocks of rotary self-attention followed by a mixture-of-experts
feed-forward layer, with tied input/output embeddings.  Visual positions
receive externally supplied hidden vectors (from the vision encoder)
instead of vocabulary embeddings.  Also hosts the pure-arithmetic
parameter-count report used by the dry run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import RMSNorm, SelfAttention, flatten_parameters, rope_apply
from .moe import MODALITY_TEXT, MODALITY_VISUAL, MoEConfig, MoELayer, RoutingRecord
from .tensor import ShapeError, Tensor, gather_rows, matmul, scatter_rows, transpose

__all__ = [
    "DecoderConfig", "TokenSequence", "DecoderBlock", "MoEDecoder",
    "ParameterReport", "count_parameters", "next_token_targets", "rope_apply",
    "IGNORE_INDEX",
]

IGNORE_INDEX = -100


@dataclass(frozen=True)
class DecoderConfig:
    hidden_dim: int
    n_layers: int
    n_heads: int
    head_dim: int
    vocab_size: int
    context_length: int
    rope_base: float
    moe: MoEConfig

    def __post_init__(self):
        if (min(self.hidden_dim, self.n_heads, self.head_dim, self.vocab_size,
                self.context_length) <= 0 or self.n_layers < 0):
            raise ValueError("DecoderConfig sizes must be positive "
                             "(n_layers may be zero)")
        if self.n_heads * self.head_dim != self.hidden_dim:
            raise ValueError(
                f"n_heads {self.n_heads} x head_dim {self.head_dim} "
                f"!= hidden_dim {self.hidden_dim}")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.moe.hidden_dim != self.hidden_dim:
            raise ValueError("moe.hidden_dim must match decoder hidden_dim")

    def with_context(self, context_length: int, rope_base: float) -> "DecoderConfig":
        """Same architecture at a new context window / rotary base."""
        return DecoderConfig(
            hidden_dim=self.hidden_dim, n_layers=self.n_layers,
            n_heads=self.n_heads, head_dim=self.head_dim,
            vocab_size=self.vocab_size, context_length=context_length,
            rope_base=rope_base, moe=self.moe)


def published_preset() -> DecoderConfig:
    """Published-scale decoder geometry (for counting, not instantiation)."""
    return DecoderConfig(
        hidden_dim=2560, n_layers=28, n_heads=20, head_dim=128,
        vocab_size=100_000, context_length=8192, rope_base=100_000.0,
        moe=MoEConfig(hidden_dim=2560, n_routed=64, n_shared=2, top_k=6,
                      expert_ffn_dim=1664, group_size=8))


def desk_preset() -> DecoderConfig:
    """Small config that trains in seconds on a CPU."""
    return DecoderConfig(
        hidden_dim=64, n_layers=2, n_heads=4, head_dim=16,
        vocab_size=258, context_length=128, rope_base=100_000.0,
        moe=MoEConfig(hidden_dim=64, n_routed=8, n_shared=1, top_k=2,
                      expert_ffn_dim=48, group_size=4))


@dataclass
class TokenSequence:
    """Token ids with per-position modality tags and rotary positions."""

    token_ids: np.ndarray
    modality_mask: np.ndarray     # MODALITY_TEXT / MODALITY_VISUAL per position
    positions: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.modality_mask = np.asarray(self.modality_mask, dtype=np.uint8)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = self.token_ids.shape
        if self.modality_mask.shape != n or self.positions.shape != n:
            raise ShapeError("TokenSequence fields must have equal length")
        if len(self.positions) > 1 and not (np.diff(self.positions) > 0).all():
            raise ValueError("TokenSequence positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.token_ids)

    @classmethod
    def text(cls, token_ids) -> "TokenSequence":
        ids = np.asarray(token_ids, dtype=np.int64)
        return cls(ids, np.full(len(ids), MODALITY_TEXT, dtype=np.uint8),
                   np.arange(len(ids)))


def next_token_targets(seq: TokenSequence) -> np.ndarray:
    """Shifted targets for next-token prediction.

    Position t predicts token t+1; positions whose successor is visual,
    and the final position, are ignored.
    """
    t = len(seq)
    targets = np.full(t, IGNORE_INDEX, dtype=np.int64)
    if t > 1:
        nxt_is_text = seq.modality_mask[1:] == MODALITY_TEXT
        targets[:-1] = np.where(nxt_is_text, seq.token_ids[1:], IGNORE_INDEX)
    return targets


class DecoderBlock:
    """Pre-norm residual block: rotary attention then MoE feed-forward."""

    def __init__(self, rng: np.random.Generator, config: DecoderConfig):
        self.attn_norm = RMSNorm(config.hidden_dim)
        self.attention = SelfAttention(rng, config.hidden_dim, config.n_heads,
                                       causal=True, use_rope=True)
        self.moe_norm = RMSNorm(config.hidden_dim)
        self.moe = MoELayer(rng, config.moe)

    def __call__(self, hidden: Tensor, positions, rope_base: float,
                 layer_index: int, modality) -> tuple[Tensor, RoutingRecord]:
        hidden = hidden + self.attention(self.attn_norm(hidden),
                                         positions=positions, rope_base=rope_base)
        ffn_out, record = self.moe(self.moe_norm(hidden), layer_index, modality)
        return hidden + ffn_out, record

    def parameters(self) -> dict[str, Tensor]:
        return flatten_parameters("", [
            ("attn_norm", self.attn_norm), ("attention", self.attention),
            ("moe_norm", self.moe_norm), ("moe", self.moe)])


class MoEDecoder:
    """Embeddings + decoder blocks + tied language-model head."""

    def __init__(self, config: DecoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(config.hidden_dim)
        self.embedding = Tensor(
            rng.normal(0.0, std, size=(config.vocab_size, config.hidden_dim)),
            requires_grad=True)
        self.blocks = [DecoderBlock(rng, config) for _ in range(config.n_layers)]
        self.final_norm = RMSNorm(config.hidden_dim)

    def embed(self, seq: TokenSequence, visual_tokens: Tensor | None = None) -> Tensor:
        """Mix vocabulary embeddings (text) with supplied vectors (visual)."""
        cfg = self.config
        t = len(seq)
        if t > cfg.context_length:
            raise ShapeError(
                f"sequence length {t} exceeds context_length {cfg.context_length}")
        vis_idx = np.nonzero(seq.modality_mask == MODALITY_VISUAL)[0]
        text_idx = np.nonzero(seq.modality_mask == MODALITY_TEXT)[0]
        if vis_idx.size:
            if visual_tokens is None:
                raise ShapeError(
                    f"{vis_idx.size} visual positions but no visual tokens given")
            if visual_tokens.shape != (vis_idx.size, cfg.hidden_dim):
                raise ShapeError(
                    f"visual tokens {visual_tokens.shape} do not cover "
                    f"{vis_idx.size} positions of width {cfg.hidden_dim}")
        text_ids = seq.token_ids[text_idx]
        if text_ids.size and (text_ids.min() < 0 or text_ids.max() >= cfg.vocab_size):
            raise ShapeError(f"token id outside [0, {cfg.vocab_size})")

        parts = []
        if text_idx.size:
            parts.append(scatter_rows(gather_rows(self.embedding, text_ids),
                                      text_idx, t))
        if vis_idx.size:
            parts.append(scatter_rows(visual_tokens, vis_idx, t))
        if not parts:
            raise ShapeError("empty token sequence")
        hidden = parts[0]
        for extra in parts[1:]:
            hidden = hidden + extra
        return hidden

    def __call__(self, seq: TokenSequence,
                 visual_tokens: Tensor | None = None
                 ) -> tuple[Tensor, list[RoutingRecord]]:
        hidden = self.embed(seq, visual_tokens)
        records = []
        for i, block in enumerate(self.blocks):
            hidden, record = block(hidden, seq.positions,
                                   self.config.rope_base, i, seq.modality_mask)
            records.append(record)
        logits = matmul(self.final_norm(hidden), transpose(self.embedding))
        return logits, records

    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embedding}
        params.update(flatten_parameters(
            "", [(f"block.{i}", b) for i, b in enumerate(self.blocks)]))
        params["final_norm.weight"] = self.final_norm.weight
        return params


# -- parameter-count dry run ----------------------------------------------

@dataclass
class ParameterReport:
    items: dict[str, int]
    total: int
    activated_text: int
    activated_visual: int
    assumptions: list[str] = field(default_factory=list)

    def to_map(self) -> dict[str, int]:
        flat = {f"items.{k}": v for k, v in self.items.items()}
        flat["total"] = self.total
        flat["activated_text"] = self.activated_text
        flat["activated_visual"] = self.activated_visual
        return flat

    def to_text(self) -> str:
        lines = ["parameter report", "----------------"]
        width = max(len(k) for k in self.items)
        for key, val in self.items.items():
            lines.append(f"{key:<{width}}  {val:>15,}")
        lines.append("")
        lines.append(f"total                {self.total:>15,}  ({self.total / 1e9:.2f}B)")
        lines.append(f"activated per text   {self.activated_text:>15,}  "
                     f"({self.activated_text / 1e9:.2f}B)")
        lines.append(f"activated per visual {self.activated_visual:>15,}  "
                     f"({self.activated_visual / 1e9:.2f}B)")
        if self.assumptions:
            lines.append("")
            lines.append("assumptions:")
            lines.extend(f"  - {a}" for a in self.assumptions)
        return "\n".join(lines) + "\n"

    def write_files(self, text_path, map_path) -> None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(map_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_map(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def count_parameters(config: DecoderConfig, vision=None) -> ParameterReport:
    """Pure arithmetic on the config — nothing is allocated.

    Activated counts follow per-token compute: embeddings and the tied
    unembedding are lookups, not per-token matmul cost, so they are
    excluded from "activated" (this is what makes the published ratio of
    activated to total parameters reproducible).
    """
    d, ell = config.hidden_dim, config.n_layers
    m = config.moe
    per_expert = (3 if m.gated else 2) * d * m.expert_ffn_dim

    embeddings = config.vocab_size * d
    attention = ell * 4 * d * d
    router = ell * d * m.n_routed
    shared = ell * m.n_shared * per_expert
    routed = ell * m.n_routed * per_expert
    norms = ell * 2 * d + d
    vision_total = 0
    if vision is not None:
        from .vision import count_vision_parameters
        vision_total = count_vision_parameters(vision).total

    items = {"embeddings": embeddings, "attention": attention,
             "router": router, "shared_experts": shared,
             "routed_experts": routed, "norms": norms, "vision": vision_total}
    total = sum(items.values())
    activated_text = (attention + router + shared + norms
                      + ell * m.top_k * per_expert)
    report = ParameterReport(
        items=items, total=total, activated_text=activated_text,
        activated_visual=activated_text + vision_total,
        assumptions=[
            f"vocab_size {config.vocab_size} with tied input/output embeddings",
            "activated counts exclude embedding/unembedding lookups",
            f"attention geometry {config.n_heads} heads x {config.head_dim} dims",
            "every layer's FFN is a mixture-of-experts (no dense interleaving)",
        ])
    return report
