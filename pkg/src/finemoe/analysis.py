"""Expert modality-specialization statistics and heatmap export.

Counts hard top-k routing assignments per (layer, expert) split by token
modality, normalizes to per-layer activation shares R_v (visual) and
R_t (text), and reports their capped ratio as the expert's visual
specialization.  Shared experts never appear: they are activated for
every token by construction and carry no routing signal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .moe import MODALITY_VISUAL, RoutingRecord

DOMAIN_TAGS = ("natural-image", "video", "pdf-like")

SPECIALIZATION_CAP = 50.0

SOURCE_DOMAIN = {
    "caption": "natural-image",
    "web-interleaved": "natural-image",
    "video-qa": "video",
    "document-qa": "pdf-like",
}


class ActivationCounter:
    """Per-layer assignment tallies, mergeable in any order."""

    def __init__(self, n_experts: int):
        if n_experts < 1:
            raise ValueError("counter needs at least one expert")
        self.n_experts = n_experts
        self._visual: dict[int, np.ndarray] = {}
        self._text: dict[int, np.ndarray] = {}

    def _slot(self, table: dict, layer: int) -> np.ndarray:
        if layer not in table:
            table[layer] = np.zeros(self.n_experts, dtype=np.int64)
        return table[layer]

    def layers(self) -> list[int]:
        return sorted(set(self._visual) | set(self._text))

    def visual_counts(self, layer: int) -> np.ndarray:
        return self._visual.get(
            layer, np.zeros(self.n_experts, dtype=np.int64)).copy()

    def text_counts(self, layer: int) -> np.ndarray:
        return self._text.get(
            layer, np.zeros(self.n_experts, dtype=np.int64)).copy()

    def visual_total(self, layer: int) -> int:
        return int(self.visual_counts(layer).sum())

    def text_total(self, layer: int) -> int:
        return int(self.text_counts(layer).sum())

    def merge(self, other: "ActivationCounter") -> "ActivationCounter":
        if other.n_experts != self.n_experts:
            raise ValueError("cannot merge counters of different widths")
        out = ActivationCounter(self.n_experts)
        for source in (self, other):
            for layer, counts in source._visual.items():
                out._slot(out._visual, layer)[:] += counts
            for layer, counts in source._text.items():
                out._slot(out._text, layer)[:] += counts
        return out


def record_routing(counter: ActivationCounter, record: RoutingRecord) -> None:
    """Tally one routing record: each selected expert gains one
    assignment under the token's modality."""
    sel = record.selected_experts
    if sel.size == 0:
        return
    if sel.min() < 0 or sel.max() >= counter.n_experts:
        raise IndexError(
            f"expert index outside [0, {counter.n_experts}) in record "
            f"for layer {record.layer_index}")
    if record.layer_index < 0:
        raise IndexError(f"negative layer index {record.layer_index}")
    visual_rows = record.modality == MODALITY_VISUAL
    layer = record.layer_index
    counter._slot(counter._visual, layer)[:] += np.bincount(
        sel[visual_rows].ravel(), minlength=counter.n_experts)
    counter._slot(counter._text, layer)[:] += np.bincount(
        sel[~visual_rows].ravel(), minlength=counter.n_experts)


@dataclass
class SpecializationMatrix:
    """Per-layer activation shares and capped visual-specialization ratios."""

    domain: str
    cap: float
    # layer -> (R_v, R_t, specialization), each an array over experts
    entries: dict = field(default_factory=dict)
    skipped_layers: dict = field(default_factory=dict)   # layer -> reason

    def __post_init__(self):
        if self.domain not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if self.cap <= 0:
            raise ValueError("cap must be positive")

    def layers(self) -> list[int]:
        return sorted(self.entries)

    def n_experts(self) -> int:
        first = next(iter(self.entries.values()))
        return len(first[0])

    def equals(self, other: "SpecializationMatrix") -> bool:
        if self.domain != other.domain or self.layers() != other.layers():
            return False
        for layer in self.layers():
            for mine, theirs in zip(self.entries[layer],
                                    other.entries[layer]):
                if not np.array_equal(mine, theirs):
                    return False
        return True


def compute_specialization(counter: ActivationCounter,
                           cap: float = SPECIALIZATION_CAP,
                           domain: str = "natural-image"
                           ) -> SpecializationMatrix:
    """Shares and ratios per layer; layers missing a modality are
    flagged in ``skipped_layers`` rather than invented."""
    matrix = SpecializationMatrix(domain=domain, cap=cap)
    for layer in counter.layers():
        visual = counter.visual_counts(layer)
        text = counter.text_counts(layer)
        v_total, t_total = int(visual.sum()), int(text.sum())
        if v_total == 0 or t_total == 0:
            missing = []
            if v_total == 0:
                missing.append("visual")
            if t_total == 0:
                missing.append("text")
            matrix.skipped_layers[layer] = \
                f"no {' or '.join(missing)} assignments"
            continue
        r_v = visual / v_total
        r_t = text / t_total
        spec = np.zeros(counter.n_experts)
        for e in range(counter.n_experts):
            if r_t[e] > 0:
                spec[e] = min(r_v[e] / r_t[e], cap)
            elif r_v[e] > 0:
                spec[e] = cap
            # both zero: stays 0
        matrix.entries[layer] = (r_v, r_t, spec)
    return matrix


# -- CSV / SVG export ------------------------------------------------------

def _as_matrix_list(matrices) -> list:
    out = [matrices] if isinstance(matrices, SpecializationMatrix) \
        else list(matrices)
    if not out or all(not m.entries for m in out):
        raise ValueError("nothing to export: no populated layers")
    return out


def export_heatmap(matrices, csv_path, svg_path) -> None:
    """Write ``layer,expert,domain,R_v,R_t,specialization`` rows and a
    standalone SVG with one cell row per layer; both byte-deterministic."""
    mats = _as_matrix_list(matrices)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "expert", "domain", "R_v", "R_t",
                         "specialization"])
        for matrix in mats:
            for layer in matrix.layers():
                r_v, r_t, spec = matrix.entries[layer]
                for e in range(len(r_v)):
                    writer.writerow([layer, e, matrix.domain,
                                     repr(float(r_v[e])),
                                     repr(float(r_t[e])),
                                     repr(float(spec[e]))])
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(render_heatmap_svg(mats))


def parse_heatmap_csv(path, cap: float = SPECIALIZATION_CAP) -> list:
    """Rebuild matrices from an exported CSV (repr floats restore
    exactly)."""
    rows_by_domain: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["layer", "expert", "domain", "R_v", "R_t",
                      "specialization"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for layer_s, expert_s, domain, rv_s, rt_s, spec_s in reader:
            rows_by_domain.setdefault(domain, {}).setdefault(
                int(layer_s), {})[int(expert_s)] = \
                (float(rv_s), float(rt_s), float(spec_s))
    matrices = []
    for domain, layers in rows_by_domain.items():
        matrix = SpecializationMatrix(domain=domain, cap=cap)
        for layer, experts in sorted(layers.items()):
            n = max(experts) + 1
            if sorted(experts) != list(range(n)):
                raise ValueError(f"{path}: layer {layer} has gaps in its "
                                 "expert rows")
            r_v = np.array([experts[e][0] for e in range(n)])
            r_t = np.array([experts[e][1] for e in range(n)])
            spec = np.array([experts[e][2] for e in range(n)])
            matrix.entries[layer] = (r_v, r_t, spec)
        matrices.append(matrix)
    return matrices


_CELL = 14
_GAP = 2
_MARGIN = 60
_LEGEND_STEPS = 32


def _heat_color(value: float, cap: float) -> str:
    """White at 0 to deep red at cap."""
    t = min(max(value / cap, 0.0), 1.0)
    r = round(255 + (178 - 255) * t)
    g = round(255 + (24 - 255) * t)
    b = round(255 + (43 - 255) * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap_svg(matrices) -> str:
    mats = _as_matrix_list(matrices)
    n_experts = max(m.n_experts() for m in mats)
    total_rows = sum(len(m.entries) for m in mats)
    n_sections = len(mats)
    width = _MARGIN + n_experts * (_CELL + _GAP) + _MARGIN
    height = 30 + n_sections * 24 + total_rows * (_CELL + _GAP) + 70
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        '<text x="8" y="16">expert visual-specialization by layer '
        "(row = layer, column = expert)</text>",
    ]
    y = 30
    for matrix in mats:
        lines.append(f'<text x="8" y="{y + 12}">domain: {matrix.domain}'
                     "</text>")
        y += 24
        for layer in matrix.layers():
            spec = matrix.entries[layer][2]
            lines.append(f'<text x="8" y="{y + _CELL - 3}">L{layer}</text>')
            for e, value in enumerate(spec):
                x = _MARGIN + e * (_CELL + _GAP)
                lines.append(
                    f'<rect x="{x}" y="{y}" width="{_CELL}" '
                    f'height="{_CELL}" fill="{_heat_color(value, matrix.cap)}"'
                    ' stroke="#cccccc"/>')
            y += _CELL + _GAP
    cap = mats[0].cap
    y += 16
    lines.append(f'<text x="8" y="{y + 10}">specialization scale: 0 '
                 f"(never visual) to {cap:g} (cap)</text>")
    y += 16
    for i in range(_LEGEND_STEPS):
        x = _MARGIN + i * 6
        value = cap * i / (_LEGEND_STEPS - 1)
        lines.append(f'<rect x="{x}" y="{y}" width="6" height="12" '
                     f'fill="{_heat_color(value, cap)}"/>')
    lines.append(f'<text x="{_MARGIN}" y="{y + 26}">0</text>')
    lines.append(f'<text x="{_MARGIN + _LEGEND_STEPS * 6 - 12}" '
                 f'y="{y + 26}">{cap:g}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
