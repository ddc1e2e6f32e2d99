"""Four-stage training driver with checkpointing.

Stages run in a fixed order — language pretraining, multimodal
pretraining, long-context extension, post-training — each with its own
context length, rotary base, token budget, and data mixture.  The
long-context stage raises the rotary base to 5e6 and widens the context
window; checkpoints store every structural dimension in their hash
except context length and rotary base, so a checkpoint from an earlier
stage loads cleanly into the wider configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import ToyCorpus
from .data import mst_cluster, pack_sequences, BagOfWordsOracle, PackedSequence
from .decoder import DecoderConfig, IGNORE_INDEX, MoEDecoder, TokenSequence, \
    next_token_targets
from .moe import MODALITY_VISUAL, RoutingTraceWriter, load_balance_loss, z_loss
from .tensor import NumericalError, Tensor, backward, concat, cross_entropy, \
    reset_graph, zero_grad
from .tokenizer import ByteTokenizer
from .vision import VisionConfig, VisionEncoder, visual_token_count

STAGE_TAGS = ("language-pretrain", "multimodal-pretrain", "long-context",
              "post-train")

LONG_CONTEXT_ROPE_BASE = 5e6

_CKPT_MAGIC = b"FMCK"
_CKPT_VERSION = 1


class MissingDataError(ValueError):
    """The corpus lacks a source tag the stage mixture requires."""


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


# -- stage configuration ---------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    tag: str
    context_length: int
    rope_base: float
    token_budget: int
    mixture: dict = field(default_factory=dict)   # source_tag -> weight
    balance_coefficient: float = 0.01
    z_coefficient: float = 0.001
    peak_lr: float = 3e-3
    warmup_steps: int = 20
    decay: str = "constant"                       # or "cosine"
    lr_floor: float = 1e-6

    def __post_init__(self):
        if self.tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.tag!r}")
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.token_budget < 0:
            raise ValueError("token_budget must be nonnegative")
        if not self.mixture or any(w < 0 for w in self.mixture.values()) \
                or sum(self.mixture.values()) <= 0:
            raise ValueError("mixture needs nonnegative weights summing > 0")
        if self.balance_coefficient < 0 or self.z_coefficient < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.peak_lr <= 0 or self.warmup_steps < 0 or self.lr_floor < 0:
            raise ValueError("bad learning-rate schedule")
        if self.decay not in ("constant", "cosine"):
            raise ValueError(f"unknown decay shape {self.decay!r}")

    def required_tags(self) -> set:
        return {tag for tag, w in self.mixture.items() if w > 0}


def default_stages() -> list[StageConfig]:
    """Toy-scale defaults: budgets keep the ordering of a real pipeline
    (heavy pretrain, lighter refinement), not its magnitudes."""
    return [
        StageConfig(
            tag="language-pretrain", context_length=128, rope_base=1e5,
            token_budget=1_000_000, mixture={"language": 1.0}),
        StageConfig(
            tag="multimodal-pretrain", context_length=128, rope_base=1e5,
            token_budget=500_000,
            mixture={"language": 0.4, "caption": 0.3, "web-interleaved": 0.3}),
        StageConfig(
            tag="long-context", context_length=512,
            rope_base=LONG_CONTEXT_ROPE_BASE, token_budget=200_000,
            mixture={"language": 0.3, "caption": 0.2, "web-interleaved": 0.2,
                     "document-qa": 0.15, "video-qa": 0.15}),
        StageConfig(
            tag="post-train", context_length=512,
            rope_base=LONG_CONTEXT_ROPE_BASE, token_budget=100_000,
            mixture={"document-qa": 0.4, "video-qa": 0.3, "caption": 0.2,
                     "language": 0.1},
            decay="cosine"),
    ]


def validate_stage_sequence(stages: list[StageConfig]) -> None:
    """Fixed order; context never shrinks; long-context raises the base."""
    order = [STAGE_TAGS.index(s.tag) for s in stages]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ValueError("stages must follow the fixed order, each at most once")
    max_prior_context = 0
    for s in stages:
        if s.tag in ("language-pretrain", "multimodal-pretrain", "long-context"):
            if s.context_length < max_prior_context:
                raise ValueError("context_length must not shrink across "
                                 "pretraining stages")
        if s.tag == "long-context":
            if s.rope_base != LONG_CONTEXT_ROPE_BASE:
                raise ValueError("long-context stage requires rope_base 5e6")
            if s.context_length <= max_prior_context:
                raise ValueError("long-context stage must widen the context")
        max_prior_context = max(max_prior_context, s.context_length)


def learning_rate(stage: StageConfig, step: int, total_steps: int) -> float:
    """Linear warmup, then constant or cosine decay to the floor."""
    if step < stage.warmup_steps:
        return stage.peak_lr * (step + 1) / stage.warmup_steps
    if stage.decay == "constant":
        return stage.peak_lr
    span = max(1, total_steps - stage.warmup_steps)
    progress = min(1.0, (step - stage.warmup_steps) / span)
    return stage.lr_floor + (stage.peak_lr - stage.lr_floor) \
        * 0.5 * (1.0 + math.cos(math.pi * progress))


def total_loss(lm: Tensor, balance: Tensor, z: Tensor,
               stage: StageConfig) -> Tensor:
    for name, t in (("lm", lm), ("balance", balance), ("z", z)):
        if not np.isfinite(t.data).all():
            raise NumericalError(f"non-finite {name} loss")
    return lm + balance * stage.balance_coefficient + z * stage.z_coefficient


# -- optimizer -------------------------------------------------------------

class AdamOptimizer:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, parameters: dict, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8):
        self.parameters = dict(parameters)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.parameters.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.parameters.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.parameters.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(list(self.parameters.values()))


# -- checkpoints -----------------------------------------------------------

def structural_hash(config: DecoderConfig,
                    vision_config: VisionConfig | None = None) -> str:
    """Hash of every shape-determining field.

    context_length and rope_base are deliberately excluded: they change
    across training stages without changing any parameter shape.
    """
    moe = config.moe
    payload = {
        "decoder": {
            "hidden_dim": config.hidden_dim, "n_layers": config.n_layers,
            "n_heads": config.n_heads, "head_dim": config.head_dim,
            "vocab_size": config.vocab_size,
        },
        "moe": {
            "hidden_dim": moe.hidden_dim, "n_routed": moe.n_routed,
            "n_shared": moe.n_shared, "top_k": moe.top_k,
            "expert_ffn_dim": moe.expert_ffn_dim,
            "group_size": moe.group_size, "gated": moe.gated,
        },
        "vision": None if vision_config is None else {
            "output_dim": vision_config.output_dim,
            "patch_size": vision_config.patch_size,
            "vit_dim": vision_config.vit_dim,
            "vit_layers": vision_config.vit_layers,
            "vit_heads": vision_config.vit_heads,
            "vit_ffn_dim": vision_config.vit_ffn_dim,
            "resampler_ffn_dim": vision_config.resampler_ffn_dim,
            "n_queries_base": vision_config.n_queries_base,
            "n_queries_high_extra": vision_config.n_queries_high_extra,
            "max_grid": vision_config.max_grid,
        },
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _named_parameters(model: MoEDecoder,
                      vision: VisionEncoder | None) -> dict:
    params = dict(model.parameters())
    if vision is not None:
        params.update({f"vision.{k}": v
                       for k, v in vision.parameters().items()})
    return params


def checkpoint_save(model: MoEDecoder, optimizer: AdamOptimizer | None,
                    path, stage_tag: str = STAGE_TAGS[0], step: int = 0,
                    vision: VisionEncoder | None = None) -> None:
    params = _named_parameters(model, vision)
    manifest = [{"name": k, "shape": list(p.data.shape)}
                for k, p in params.items()]
    blocks = [p.data.astype("<f8").tobytes() for p in params.values()]
    optimizer_names: list[str] = []
    if optimizer is not None:
        optimizer_names = list(optimizer.parameters.keys())
        unknown = [n for n in optimizer_names if n not in params]
        if unknown:
            raise CheckpointError(f"optimizer tracks unknown names {unknown}")
        for name in optimizer_names:
            blocks.append(optimizer.m[name].astype("<f8").tobytes())
        for name in optimizer_names:
            blocks.append(optimizer.v[name].astype("<f8").tobytes())
    payload = b"".join(blocks)
    header = {
        "format_version": _CKPT_VERSION,
        "structural_hash": structural_hash(
            model.config, None if vision is None else vision.config),
        "stage": stage_tag,
        "step": step,
        # informational only: excluded from the structural hash so later
        # stages can reload under a wider context / higher rotary base
        "context_length": model.config.context_length,
        "rope_base": model.config.rope_base,
        "vision_config": None if vision is None
        else dataclasses.asdict(vision.config),
        "manifest": manifest,
        "optimizer_names": optimizer_names,
        "optimizer_step_count": 0 if optimizer is None
        else optimizer.step_count,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_checkpoint(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if len(blob) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    return header, blob[8 + hlen:]


def read_checkpoint_header(path) -> dict:
    return _read_checkpoint(path)[0]


def checkpoint_load(path, config: DecoderConfig,
                    vision_config: VisionConfig | None = None,
                    with_optimizer: bool = False):
    """Rebuild (model, vision, optimizer, header) from a checkpoint.

    The caller's config may differ from the saved one in context_length
    and rope_base only; any structural difference is refused.
    """
    header, payload = _read_checkpoint(path)
    expect = structural_hash(config, vision_config)
    if header["structural_hash"] != expect:
        raise CheckpointError(
            f"{path}: structural hash mismatch (checkpoint "
            f"{header['structural_hash'][:12]}…, requested {expect[:12]}…)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload integrity check failed")

    model = MoEDecoder(config, seed=0)
    vision = None if vision_config is None \
        else VisionEncoder(vision_config, seed=0)
    params = _named_parameters(model, vision)
    names = [m["name"] for m in header["manifest"]]
    if names != list(params.keys()):
        raise CheckpointError(f"{path}: parameter manifest does not match "
                              "the requested configuration")
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        return arr.reshape(shape).astype(np.float64)

    for meta in header["manifest"]:
        p = params[meta["name"]]
        if list(p.data.shape) != meta["shape"]:
            raise CheckpointError(
                f"{path}: shape mismatch for {meta['name']}")
        p.data = take(meta["shape"])

    optimizer = None
    if with_optimizer and header["optimizer_names"]:
        tracked = {n: params[n] for n in header["optimizer_names"]}
        optimizer = AdamOptimizer(tracked)
        optimizer.step_count = int(header["optimizer_step_count"])
        for name in header["optimizer_names"]:
            optimizer.m[name] = take(list(params[name].data.shape))
        for name in header["optimizer_names"]:
            optimizer.v[name] = take(list(params[name].data.shape))
    return model, vision, optimizer, header


# -- stage training --------------------------------------------------------

@dataclass
class StageReport:
    stage: str
    seed: int
    n_steps: int = 0
    tokens_consumed: int = 0
    loss_curve: list = field(default_factory=list)
    lm_curve: list = field(default_factory=list)
    balance_curve: list = field(default_factory=list)
    z_curve: list = field(default_factory=list)
    diverged: bool = False
    checkpoint_path: str | None = None
    trace_path: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")


def _normalize_corpus(corpus) -> ToyCorpus:
    if isinstance(corpus, ToyCorpus):
        return corpus
    return ToyCorpus(documents=list(corpus), images={}, topic_of_doc={})


def _prepare_packs(corpus: ToyCorpus, stage: StageConfig,
                   vision: VisionEncoder | None, tokenizer: ByteTokenizer,
                   cut_threshold: float) -> dict:
    """Cluster + pack the stage's documents per source tag.

    Language documents are clustered by text similarity; other tags form
    one cluster each (their alignment already groups them).
    """
    by_tag: dict = {}
    for doc in sorted(corpus.documents, key=lambda d: d.doc_id):
        by_tag.setdefault(doc.source_tag, []).append(doc)
    missing = sorted(stage.required_tags() - set(by_tag))
    if missing:
        raise MissingDataError(
            f"stage {stage.tag} needs source tags {missing} "
            "absent from the corpus")

    def token_count_for(ref: str) -> int:
        if vision is None:
            raise MissingDataError(
                f"stage {stage.tag} met image {ref} but no vision encoder "
                "was provided")
        img = corpus.images[ref]
        return visual_token_count(img.height, img.width, vision.config)

    packs_by_tag: dict = {}
    for tag in sorted(stage.required_tags()):
        docs = by_tag[tag]
        if tag == "language":
            labels = mst_cluster([d.text() for d in docs],
                                 BagOfWordsOracle(), cut_threshold)
            clusters: list = [[] for _ in range(max(labels) + 1)]
            for doc, label in zip(docs, labels):
                clusters[label].append(doc)
        else:
            clusters = [docs]
        packs, _ = pack_sequences(clusters, tokenizer, stage.context_length,
                                  image_token_count=token_count_for)
        packs_by_tag[tag] = packs
    return packs_by_tag


def _pack_visual_tokens(pack: PackedSequence, corpus: ToyCorpus,
                        vision: VisionEncoder | None) -> Tensor | None:
    if not pack.image_spans:
        return None
    pieces = [vision.encode_image(corpus.images[ref])
              for ref, _, _ in pack.image_spans]
    return pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)


def _pack_targets(pack: PackedSequence, seq: TokenSequence) -> np.ndarray:
    targets = next_token_targets(seq)
    if len(seq) > 1:
        masked_next = pack.loss_mask[1:] == 0
        targets[:-1] = np.where(masked_next, IGNORE_INDEX, targets[:-1])
    return targets


def train_stage(model: MoEDecoder, stage: StageConfig, corpus, *,
                seed: int = 0, out_dir=None,
                vision: VisionEncoder | None = None,
                train_vision: bool = True,
                max_steps: int | None = None,
                cut_threshold: float = 0.5) -> StageReport:
    """Run one stage to its token budget and checkpoint the result.

    Deterministic for a fixed (seed, stage, corpus).  On a non-finite
    loss the stage aborts and the checkpoint holds the last finite step.
    """
    corpus = _normalize_corpus(corpus)
    tokenizer = ByteTokenizer()
    model.config = model.config.with_context(stage.context_length,
                                             stage.rope_base)
    packs_by_tag = _prepare_packs(corpus, stage, vision, tokenizer,
                                  cut_threshold)

    trainable = dict(model.parameters())
    if vision is not None and train_vision:
        trainable.update({f"vision.{k}": v
                          for k, v in vision.parameters().items()})
    optimizer = AdamOptimizer(trainable)
    report = StageReport(stage=stage.tag, seed=seed)

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.trace_path = os.path.join(out_dir, f"{stage.tag}.trace")
        report.checkpoint_path = os.path.join(out_dir, f"{stage.tag}.ckpt")
        writer = RoutingTraceWriter(report.trace_path)

    tags = sorted(stage.required_tags())
    tag_weights = np.array([stage.mixture[t] for t in tags], dtype=np.float64)
    tag_cdf = np.cumsum(tag_weights / tag_weights.sum())
    schedule_steps = max(1, -(-stage.token_budget // stage.context_length))
    rng = np.random.default_rng(seed)

    last_good = {k: p.data.copy() for k, p in trainable.items()}
    last_good_moments = None
    try:
        while report.tokens_consumed < stage.token_budget \
                and (max_steps is None or report.n_steps < max_steps):
            tag = tags[int(np.searchsorted(tag_cdf, rng.random(),
                                           side="right"))]
            choices = packs_by_tag[tag]
            pack = choices[int(rng.integers(len(choices)))]
            seq = TokenSequence(pack.token_ids, pack.modality_mask,
                                np.arange(len(pack)))
            targets = _pack_targets(pack, seq)
            if (targets == IGNORE_INDEX).all():
                report.tokens_consumed += len(seq)   # nothing to learn from
                continue

            reset_graph()
            try:
                visual = _pack_visual_tokens(pack, corpus, vision)
                logits, records = model(seq, visual)
                lm = cross_entropy(logits, targets,
                                   ignore_index=IGNORE_INDEX)
                balance = Tensor(0.0)
                z = Tensor(0.0)
                for record in records:
                    b, _ = load_balance_loss(record, model.config.moe)
                    balance = balance + b
                    z = z + z_loss(record.logits_tensor)
                scale = 1.0 / max(1, len(records))
                balance = balance * scale
                z = z * scale
                loss = total_loss(lm, balance, z, stage)
                backward(loss)
            except NumericalError:
                report.diverged = True
                break

            optimizer.step(learning_rate(stage, report.n_steps,
                                         schedule_steps))
            optimizer.zero_grad()
            # backward passes are unchecked, so a blown-up gradient can
            # poison parameters while every forward output stays finite
            if any(not np.isfinite(p.data).all()
                   for p in trainable.values()):
                report.diverged = True
                break

            if writer is not None:
                for record in records:
                    writer.add(record)
            report.n_steps += 1
            report.tokens_consumed += len(seq)
            report.loss_curve.append(float(loss.item()))
            report.lm_curve.append(float(lm.item()))
            report.balance_curve.append(float(balance.item()))
            report.z_curve.append(float(z.item()))
            for k, p in trainable.items():
                last_good[k] = p.data.copy()
            last_good_moments = (optimizer.step_count,
                                 {k: m.copy() for k, m in optimizer.m.items()},
                                 {k: v.copy() for k, v in optimizer.v.items()})
    finally:
        if writer is not None:
            writer.close()

    if report.diverged:
        for k, p in trainable.items():
            p.data = last_good[k].copy()
        if last_good_moments is not None:
            optimizer.step_count, optimizer.m, optimizer.v = last_good_moments
        else:
            optimizer = AdamOptimizer(trainable)

    if report.checkpoint_path is not None:
        checkpoint_save(model, optimizer, report.checkpoint_path,
                        stage_tag=stage.tag, step=report.n_steps,
                        vision=vision)
        report.save(os.path.join(out_dir, f"{stage.tag}.report.json"))
    return report
