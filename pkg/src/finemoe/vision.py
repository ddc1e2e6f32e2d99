"""Vision encoder: resolution tiering, native-aspect patchification, a
small vision transformer, and a cross-attention resampler producing a
fixed number of decoder-width visual tokens per image.

Token-count law: medium image -> n_queries_base tokens (128), high ->
base + extra (256), ultra -> 256 per tile after ceil-grid decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .images import ImageInput, resize_bilinear
from .layers import (
    CrossAttention, FeedForward, RMSNorm, SelfAttention, flatten_parameters,
    init_weight,
)
from .tensor import ShapeError, Tensor, concat, gather_rows, matmul

TIER_MEDIUM = "medium"
TIER_HIGH = "high"
TIER_ULTRA = "ultra"

MEDIUM_LONG_EDGE = 490
HIGH_LONG_EDGE = 980


@dataclass(frozen=True)
class VisionConfig:
    output_dim: int
    patch_size: int = 14
    vit_dim: int = 64
    vit_layers: int = 2
    vit_heads: int = 2
    vit_ffn_dim: int = 128
    resampler_ffn_dim: int = 128
    n_queries_base: int = 128
    n_queries_high_extra: int = 128
    max_grid: int = 70

    def __post_init__(self):
        if min(self.output_dim, self.patch_size, self.vit_dim, self.vit_layers,
               self.vit_heads, self.vit_ffn_dim, self.resampler_ffn_dim,
               self.n_queries_base, self.n_queries_high_extra) <= 0:
            raise ValueError("VisionConfig sizes must be positive")
        for target in (MEDIUM_LONG_EDGE, HIGH_LONG_EDGE):
            if target % self.patch_size != 0:
                raise ValueError(
                    f"patch_size {self.patch_size} must divide the tier "
                    f"target edges {MEDIUM_LONG_EDGE}/{HIGH_LONG_EDGE}")
        if self.max_grid < HIGH_LONG_EDGE // self.patch_size:
            raise ValueError("max_grid too small for the high-tier patch grid")

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


def desk_vision_preset(output_dim: int = 64) -> VisionConfig:
    return VisionConfig(output_dim=output_dim)


def published_vision_preset() -> VisionConfig:
    """Published-scale geometry, used only for parameter counting."""
    return VisionConfig(output_dim=2560, patch_size=14, vit_dim=1152,
                        vit_layers=27, vit_heads=16, vit_ffn_dim=4304,
                        resampler_ffn_dim=4304)


@dataclass
class ResolutionTier:
    """Size classification plus, for ultra, the row-major tile crop boxes.

    Each ``tiles`` entry is a (y0, y1, x0, x1) pixel box; every cropped
    tile is subsequently processed as a high-tier image.
    """

    tag: str
    target_long_edge: int | None
    tiles: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if (self.tag == TIER_ULTRA) != bool(self.tiles):
            raise ValueError("tiles must be nonempty exactly for the ultra tier")


def _round_to_patches(px: float, patch: int) -> int:
    """Nearest patch multiple (half rounds up), at least one patch."""
    return max(patch, int(math.floor(px / patch + 0.5)) * patch)


def _fit_long_edge(h: int, w: int, target: int, patch: int) -> tuple[int, int]:
    scale = target / max(h, w)
    if h >= w:
        return target, _round_to_patches(w * scale, patch)
    return _round_to_patches(h * scale, patch), target


def _tile_boxes(h: int, w: int) -> list[tuple[int, int, int, int]]:
    rows = math.ceil(h / HIGH_LONG_EDGE)
    cols = math.ceil(w / HIGH_LONG_EDGE)
    ys = [round(i * h / rows) for i in range(rows + 1)]
    xs = [round(j * w / cols) for j in range(cols + 1)]
    return [(ys[i], ys[i + 1], xs[j], xs[j + 1])
            for i in range(rows) for j in range(cols)]


def tier_image(h: int, w: int, patch_size: int = 14
               ) -> tuple[ResolutionTier, tuple[int, int]]:
    """Classify a pixel size and return the tier plus the resize target.

    Medium/high images keep their aspect ratio: the long edge lands on
    the tier target and the short edge is rounded to the nearest patch
    multiple.  Ultra images are not resized here; their crop boxes are
    returned for decomposition into high-tier tiles.
    """
    if h < 1 or w < 1:
        raise ValueError("image size must be at least 1x1")
    long_edge = max(h, w)
    if long_edge <= MEDIUM_LONG_EDGE:
        tier = ResolutionTier(TIER_MEDIUM, MEDIUM_LONG_EDGE)
        return tier, _fit_long_edge(h, w, MEDIUM_LONG_EDGE, patch_size)
    if long_edge <= HIGH_LONG_EDGE:
        tier = ResolutionTier(TIER_HIGH, HIGH_LONG_EDGE)
        return tier, _fit_long_edge(h, w, HIGH_LONG_EDGE, patch_size)
    return ResolutionTier(TIER_ULTRA, None, _tile_boxes(h, w)), (h, w)


def decompose_ultra(img: ImageInput, patch_size: int = 14) -> list[ImageInput]:
    """Crop an ultra image into its near-equal high-tier tiles (row-major)."""
    tier, _ = tier_image(img.height, img.width, patch_size)
    if tier.tag != TIER_ULTRA:
        raise ValueError(
            f"decompose_ultra on a {tier.tag} image ({img.height}x{img.width})")
    return [ImageInput(img.pixels[y0:y1, x0:x1].copy())
            for y0, y1, x0, x1 in tier.tiles]


def visual_token_count(h: int, w: int, config: VisionConfig) -> int:
    """Token count from size alone — no encoding, no allocation."""
    tier, _ = tier_image(h, w, config.patch_size)
    per_high = config.n_queries_base + config.n_queries_high_extra
    if tier.tag == TIER_MEDIUM:
        return config.n_queries_base
    if tier.tag == TIER_HIGH:
        return per_high
    return per_high * len(tier.tiles)


@dataclass
class PatchSequence:
    patches: Tensor                 # [N, 3 * p * p]
    grid: tuple[int, int]           # (rows, cols)
    patch_size: int

    def __post_init__(self):
        if self.patches.shape[0] != self.grid[0] * self.grid[1]:
            raise ShapeError(
                f"{self.patches.shape[0]} patches but grid {self.grid}")

    def row_col_indices(self) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = self.grid
        idx = np.arange(rows * cols)
        return idx // cols, idx % cols


def patchify(img: ImageInput, patch_size: int) -> PatchSequence:
    h, w = img.height, img.width
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"{h}x{w} is not a multiple of patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    p = patch_size
    flat = (img.pixels.reshape(rows, p, cols, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(rows * cols, p * p * 3))
    return PatchSequence(Tensor(flat), (rows, cols), p)


def unpatchify(seq: PatchSequence) -> ImageInput:
    rows, cols = seq.grid
    p = seq.patch_size
    pixels = (seq.patches.data.reshape(rows, cols, p, p, 3)
              .transpose(0, 2, 1, 3, 4)
              .reshape(rows * p, cols * p, 3))
    return ImageInput(pixels)


class ViT:
    """Bidirectional transformer over patch embeddings with additive
    learned row/column position embeddings."""

    def __init__(self, rng: np.random.Generator, config: VisionConfig):
        self.config = config
        d = config.vit_dim
        self.patch_embed = init_weight(rng, config.patch_dim, d)
        std = 1.0 / np.sqrt(d)
        self.pos_row = Tensor(rng.normal(0, std, size=(config.max_grid, d)),
                              requires_grad=True)
        self.pos_col = Tensor(rng.normal(0, std, size=(config.max_grid, d)),
                              requires_grad=True)
        self.blocks = []
        for _ in range(config.vit_layers):
            self.blocks.append({
                "attn_norm": RMSNorm(d),
                "attention": SelfAttention(rng, d, config.vit_heads,
                                           causal=False),
                "ffn_norm": RMSNorm(d),
                "ffn": FeedForward(rng, d, config.vit_ffn_dim, d, gated=False),
            })
        self.final_norm = RMSNorm(d)

    def __call__(self, patches: Tensor, row_idx, col_idx) -> Tensor:
        cfg = self.config
        if patches.data.ndim != 2 or patches.shape[1] != cfg.patch_dim:
            raise ShapeError(
                f"expected [N, {cfg.patch_dim}] patches, got {patches.shape}")
        rows = np.asarray(row_idx, dtype=np.intp)
        cols = np.asarray(col_idx, dtype=np.intp)
        if rows.size and max(rows.max(), cols.max()) >= cfg.max_grid:
            raise ShapeError(f"patch grid exceeds max_grid {cfg.max_grid}")
        h = (matmul(patches, self.patch_embed)
             + gather_rows(self.pos_row, rows)
             + gather_rows(self.pos_col, cols))
        for blk in self.blocks:
            h = h + blk["attention"](blk["attn_norm"](h))
            h = h + blk["ffn"](blk["ffn_norm"](h))
        return self.final_norm(h)

    def parameters(self) -> dict[str, Tensor]:
        params = {"patch_embed": self.patch_embed,
                  "pos_row": self.pos_row, "pos_col": self.pos_col}
        for i, blk in enumerate(self.blocks):
            params.update(flatten_parameters(
                f"block.{i}.", list(blk.items())))
        params["final_norm.weight"] = self.final_norm.weight
        return params


class Resampler:
    """Learned queries cross-attend to patch embeddings, then an FFN maps
    to decoder width.  No residuals or norms: with a single key the
    output is exactly ffn(out_proj(value)) per query."""

    def __init__(self, rng: np.random.Generator, config: VisionConfig):
        self.config = config
        d = config.vit_dim
        std = 1.0 / np.sqrt(d)
        self.queries_base = Tensor(
            rng.normal(0, std, size=(config.n_queries_base, d)),
            requires_grad=True)
        self.queries_extra = Tensor(
            rng.normal(0, std, size=(config.n_queries_high_extra, d)),
            requires_grad=True)
        self.cross = CrossAttention(rng, d, config.vit_heads)
        self.ffn = FeedForward(rng, d, config.resampler_ffn_dim,
                               config.output_dim, gated=True)

    def __call__(self, embeddings: Tensor, tier_tag: str) -> Tensor:
        if tier_tag == TIER_MEDIUM:
            queries = self.queries_base
        elif tier_tag == TIER_HIGH:
            queries = concat([self.queries_base, self.queries_extra], axis=0)
        else:
            raise ValueError(
                f"resampler queries undefined for tier {tier_tag!r} "
                "(ultra images are encoded tile-by-tile as high)")
        return self.ffn(self.cross(queries, embeddings))

    def parameters(self) -> dict[str, Tensor]:
        params = {"queries_base": self.queries_base,
                  "queries_extra": self.queries_extra}
        params.update(flatten_parameters(
            "", [("cross", self.cross), ("ffn", self.ffn)]))
        return params


class VisionEncoder:
    """tier -> resize -> patchify -> ViT -> resample, per image."""

    def __init__(self, config: VisionConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.vit = ViT(rng, config)
        self.resampler = Resampler(rng, config)

    def _encode_resized(self, img: ImageInput, tier_tag: str,
                        target: int) -> Tensor:
        p = self.config.patch_size
        h2, w2 = _fit_long_edge(img.height, img.width, target, p)
        seq = patchify(resize_bilinear(img, h2, w2), p)
        rows, cols = seq.row_col_indices()
        return self.resampler(self.vit(seq.patches, rows, cols), tier_tag)

    def encode_image(self, img: ImageInput) -> Tensor:
        tier, _ = tier_image(img.height, img.width, self.config.patch_size)
        if tier.tag == TIER_MEDIUM:
            return self._encode_resized(img, TIER_MEDIUM, MEDIUM_LONG_EDGE)
        if tier.tag == TIER_HIGH:
            return self._encode_resized(img, TIER_HIGH, HIGH_LONG_EDGE)
        tiles = decompose_ultra(img, self.config.patch_size)
        return concat([self._encode_resized(t, TIER_HIGH, HIGH_LONG_EDGE)
                       for t in tiles], axis=0)

    def parameters(self) -> dict[str, Tensor]:
        return flatten_parameters(
            "", [("vit", self.vit), ("resampler", self.resampler)])


@dataclass
class VisionParameterReport:
    items: dict[str, int]
    total: int


def count_vision_parameters(config: VisionConfig) -> VisionParameterReport:
    """Pure arithmetic from the config — nothing is allocated."""
    d, ffn = config.vit_dim, config.vit_ffn_dim
    items = {
        "patch_embed": config.patch_dim * d,
        "positions": 2 * config.max_grid * d,
        "vit_attention": config.vit_layers * 4 * d * d,
        "vit_ffn": config.vit_layers * 2 * d * ffn,
        "vit_norms": config.vit_layers * 2 * d + d,
        "queries": (config.n_queries_base + config.n_queries_high_extra) * d,
        "resampler_attention": 4 * d * d,
        "resampler_ffn": 2 * d * config.resampler_ffn_dim
        + config.resampler_ffn_dim * config.output_dim,
    }
    return VisionParameterReport(items=items, total=sum(items.values()))
