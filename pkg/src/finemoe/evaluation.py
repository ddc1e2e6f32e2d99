"""Long-context retrieval evaluation and the parameter-count runner.

The needle-in-a-haystack harness plants a unique key-value fact (the
"needle") at a controlled depth inside seeded filler text, appends a
question referencing the key, and scores answers by exact match.  A
non-neural retrieval oracle that string-scans the context validates the
harness independently of any model; models answer by greedy decoding.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import (
    ParameterReport,
    TokenSequence,
    count_parameters,
    desk_preset,
    published_preset,
)
from .tensor import reset_graph
from .tokenizer import ByteTokenizer
from .vision import desk_vision_preset, published_vision_preset

# Closed vocabulary of answer values.  Uppercase keeps them disjoint from
# the all-lowercase filler, and equal lengths give a fixed decode budget.
VALUE_VOCABULARY = ("AMBER", "AZURE", "CORAL", "IVORY",
                    "MAUVE", "OCHRE", "OLIVE", "SEPIA")

DEFAULT_GRID_LENGTHS = (512, 1024, 2048, 4096)
DEFAULT_GRID_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)

# Filler building blocks: lowercase letters, spaces and periods only, and
# no word that also appears in the needle or question templates, so the
# key (which contains digits) and the values (uppercase) cannot collide
# with filler by construction.
_ADJECTIVES = ("quiet", "pale", "dusty", "mellow", "round",
               "broad", "thin", "soft", "narrow", "faded")
_NOUNS = ("harbor", "meadow", "lantern", "orchard", "bridge",
          "garden", "window", "valley", "market", "stream")
_VERBS = ("rests beside", "drifts past", "stands near",
          "turns toward", "leans over", "waits by")

_TOKENIZER = ByteTokenizer()


class ContextTooShortError(ValueError):
    """A case does not fit in the model's context window."""


@dataclass(frozen=True)
class NIAHCase:
    """One needle-in-a-haystack probe.

    ``context`` is filler text with the needle sentence inserted;
    ``question`` is appended after the context at scoring time.  The
    depth of the needle span is measured at the fraction-``depth`` point
    through the span, so depth 0 anchors its start and depth 1 its end.
    """

    context: str
    needle: str
    key: str
    question: str
    answer: str
    depth: float
    needle_start: int      # token index of the needle's first token

    def __post_init__(self):
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError(f"depth {self.depth} outside [0, 1]")
        if self.context.count(self.needle) != 1:
            raise ValueError("needle must occur exactly once in the context")
        if self.context.count(self.key) != 1:
            raise ValueError("key must occur exactly once in the context")

    @property
    def length(self) -> int:
        return _TOKENIZER.token_count(self.context)

    def prompt(self) -> str:
        return self.context + self.question

    def depth_marker(self) -> int:
        """Token index of the fraction-``depth`` point within the needle."""
        needle_len = _TOKENIZER.token_count(self.needle)
        return self.needle_start + math.floor(self.depth * needle_len)


def _filler_sentence(rng: np.random.Generator) -> str:
    return (f"the {rng.choice(_ADJECTIVES)} {rng.choice(_NOUNS)} "
            f"{rng.choice(_VERBS)} the {rng.choice(_ADJECTIVES)} "
            f"{rng.choice(_NOUNS)}. ")


def generate_niah(length: int, depth: float, seed: int) -> NIAHCase:
    """Build one probe with ``length`` context tokens.

    The needle starts after ``floor(depth * (length - needle_tokens))``
    filler tokens, which places its depth marker within one token of
    ``floor(depth * length)``.
    """
    if not 0.0 <= depth <= 1.0:
        raise ValueError(f"depth {depth} outside [0, 1]")
    rng = np.random.default_rng(seed)
    key = f"vault-{int(rng.integers(10_000)):04d}"
    answer = str(rng.choice(VALUE_VOCABULARY))
    needle = f"the secret code for {key} is {answer}. "
    question = f"what is the secret code for {key}? answer: "
    needle_len = _TOKENIZER.token_count(needle)
    question_len = _TOKENIZER.token_count(question)
    if length < needle_len + question_len:
        raise ValueError(
            f"length {length} too small: needle and question need "
            f"{needle_len + question_len} tokens")

    filler_len = length - needle_len
    pieces, have = [], 0
    while have < filler_len:
        sentence = _filler_sentence(rng)
        pieces.append(sentence)
        have += _TOKENIZER.token_count(sentence)
    filler = "".join(pieces)[:filler_len]
    start = math.floor(depth * filler_len)
    context = filler[:start] + needle + filler[start:]
    # uniqueness scan; unreachable unless the vocabularies are edited
    # into collision
    if context.count(key) != 1 or context.count(needle) != 1:
        raise ValueError("needle text collided with generated filler")
    return NIAHCase(context=context, needle=needle, key=key,
                    question=question, answer=answer, depth=depth,
                    needle_start=start)


def generate_grid(lengths=DEFAULT_GRID_LENGTHS, depths=DEFAULT_GRID_DEPTHS,
                  cases_per_cell: int = 1, seed: int = 0) -> list[NIAHCase]:
    """Cases over the cross product of lengths and depths, seeded per case."""
    if cases_per_cell <= 0:
        raise ValueError("cases_per_cell must be positive")
    rng = np.random.default_rng(seed)
    cases = []
    for length in lengths:
        for depth in depths:
            for _ in range(cases_per_cell):
                cases.append(generate_niah(int(length), float(depth),
                                           int(rng.integers(2**63))))
    return cases


class RetrievalOracle:
    """Answers by scanning the context for the key — no model involved.

    Scoring this oracle at accuracy 1.0 everywhere certifies that the
    needle really is present, unique, and recoverable from the text.
    """

    def answer(self, case: NIAHCase) -> str:
        idx = case.context.find(case.key)
        if idx < 0:
            return ""
        rest = case.context[idx + len(case.key):]
        if not rest.startswith(" is "):
            return ""
        return rest[len(" is "):].split(".", 1)[0]


class RandomAnswerBaseline:
    """Uniform guess over the closed value vocabulary."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def answer(self, case: NIAHCase) -> str:
        return str(self._rng.choice(VALUE_VOCABULARY))


def _greedy_answer(model, case: NIAHCase) -> str:
    """Temperature-0 decode of exactly the answer's token budget."""
    ids = list(_TOKENIZER.encode(case.prompt()))
    n_answer = _TOKENIZER.token_count(case.answer)
    needed = len(ids) + n_answer
    if needed > model.config.context_length:
        raise ContextTooShortError(
            f"case needs {needed} tokens but the model context_length is "
            f"{model.config.context_length}")
    for _ in range(n_answer):
        reset_graph()
        logits, _ = model(TokenSequence.text(ids))
        ids.append(int(np.argmax(logits.data[-1])))
    return _TOKENIZER.decode(ids[-n_answer:])


@dataclass
class EvalReport:
    """Accuracy per (context length, depth) cell plus raw transcripts."""

    grid: dict                       # (length, depth) -> accuracy
    transcripts: list = field(default_factory=list)

    def __post_init__(self):
        for cell, acc in self.grid.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} at {cell} outside [0, 1]")

    def lengths(self) -> list[int]:
        return sorted({length for length, _ in self.grid})

    def depths(self) -> list[float]:
        return sorted({depth for _, depth in self.grid})

    def accuracy(self, length: int, depth: float) -> float:
        return self.grid[(length, depth)]

    def overall(self) -> float:
        if not self.transcripts:
            return 0.0
        return float(np.mean([t["correct"] for t in self.transcripts]))

    def to_json(self) -> str:
        payload = {
            "grid": [{"length": length, "depth": depth, "accuracy": acc}
                     for (length, depth), acc in sorted(self.grid.items())],
            "overall": self.overall(),
            "transcripts": self.transcripts,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def grid_csv(self) -> str:
        depths, lines = self.depths(), []
        header = ["length"] + [f"depth={d:g}" for d in depths]
        lines.append(",".join(header))
        for length in self.lengths():
            row = [str(length)]
            for depth in depths:
                acc = self.grid.get((length, depth))
                row.append("" if acc is None else repr(float(acc)))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def save(self, json_path, csv_path) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(self.grid_csv())


def score_niah(model_or_oracle, cases) -> EvalReport:
    """Score every case by exact match on the decoded answer.

    ``model_or_oracle`` is either an object with ``answer(case)`` or a
    decoder, which is decoded greedily for the answer's token budget.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("cases must be nonempty")
    answer = (model_or_oracle.answer
              if hasattr(model_or_oracle, "answer")
              else lambda case: _greedy_answer(model_or_oracle, case))
    by_cell: dict = {}
    transcripts = []
    for index, case in enumerate(cases):
        predicted = answer(case)
        correct = predicted == case.answer
        by_cell.setdefault((case.length, case.depth), []).append(correct)
        transcripts.append({
            "index": index, "length": case.length, "depth": case.depth,
            "key": case.key, "expected": case.answer,
            "predicted": predicted, "correct": bool(correct)})
    grid = {cell: float(np.mean(flags)) for cell, flags
            in sorted(by_cell.items())}
    return EvalReport(grid=grid, transcripts=transcripts)


# -- parameter-count runner ------------------------------------------------

TOTAL_PARAMETER_ANCHOR = 24.9e9
ACTIVATED_TEXT_ANCHOR = 3.5e9
ANCHOR_TOLERANCE = 0.05


def _check_within(actual: int, anchor: float, tolerance: float,
                  label: str) -> str:
    rel = abs(actual - anchor) / anchor
    if rel > tolerance:
        raise AssertionError(
            f"{label}: {actual:,} is {rel:.1%} from the anchor "
            f"{anchor:,.0f} (tolerance {tolerance:.0%})")
    return (f"{label}: {actual:,} within {tolerance:.0%} of "
            f"{anchor:,.0f} (off by {rel:.2%})")


def run_parameter_report(printer=print) -> dict[str, ParameterReport]:
    """Print counts for the published-scale and desk presets.

    The published-scale report is checked against its anchors: total
    within 5% of 24.9e9, activated-per-text-token within 5% of 3.5e9,
    and the visual-minus-text activation gap exactly the vision total.
    """
    published = count_parameters(published_preset(),
                                 vision=published_vision_preset())
    desk = count_parameters(desk_preset(), vision=desk_vision_preset())

    printer("== published-scale preset ==")
    printer(published.to_text())
    printer(_check_within(published.total, TOTAL_PARAMETER_ANCHOR,
                          ANCHOR_TOLERANCE, "total"))
    printer(_check_within(published.activated_text, ACTIVATED_TEXT_ANCHOR,
                          ANCHOR_TOLERANCE, "activated per text token"))
    gap = published.activated_visual - published.activated_text
    if gap != published.items["vision"]:
        raise AssertionError(
            f"visual-text activation gap {gap:,} != vision total "
            f"{published.items['vision']:,}")
    printer(f"visual-text activation gap equals vision total: {gap:,}")
    printer("")
    printer("== desk preset ==")
    printer(desk.to_text())
    return {"published": published, "desk": desk}
