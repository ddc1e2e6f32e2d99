"""Seeded synthetic corpora.

``generate_toy_corpus`` plants topic clusters with pairwise-disjoint
vocabularies: every document in a topic is built from shuffled passes
over that topic's word list, so per-word counts differ by at most one
and intra-topic bag-of-words cosine stays above 0.9, while inter-topic
cosine is exactly 0 — clustering at the default 0.5 threshold recovers
the planted topics with a guaranteed margin.
Images are drawn by rule (one colored shape on a black background) and
captioned by the same rule, so captions are checkable against pixels.

``generate_copy_corpus`` emits short repeated byte patterns over a
16-letter alphabet for quick loss-halving training checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Document, image_segment, text_segment
from .images import ImageInput, blank_image, draw_disk, draw_rectangle

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}

SHAPES = ("square", "disk")

DIRECTIONS = ("right", "down")

# 8 disjoint words per topic, up to 8 topics
_TOPIC_POOL = (
    "basalt quartz mica schist gneiss marble slate granite "
    "heron plover sandpiper curlew godwit dunlin snipe avocet "
    "sonata fugue prelude nocturne etude rondo toccata scherzo "
    "ladle whisk sieve spatula colander trivet skillet crock "
    "sloop ketch yawl schooner cutter brig barque clipper "
    "tibia femur ulna sternum clavicle scapula patella radius "
    "cumulus cirrus stratus nimbus haze drizzle squall sleet "
    "lexeme clause gerund copula morpheme umlaut dative ablaut"
).split()

WORDS_PER_TOPIC = 8
MAX_TOPICS = len(_TOPIC_POOL) // WORDS_PER_TOPIC


def topic_vocabulary(topic: int) -> list[str]:
    if not 0 <= topic < MAX_TOPICS:
        raise ValueError(f"topic {topic} outside 0..{MAX_TOPICS - 1}")
    lo = topic * WORDS_PER_TOPIC
    return _TOPIC_POOL[lo:lo + WORDS_PER_TOPIC]


# -- rule-drawn images -----------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """Everything needed to draw one image and derive its caption."""

    shape: str                     # one of SHAPES
    color_name: str                # key into COLORS
    height: int
    width: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color_name not in COLORS:
            raise ValueError(f"unknown color {self.color_name!r}")


def caption_for(spec: ShapeSpec) -> str:
    return f"a {spec.color_name} {spec.shape} on a black background"


def draw_shape(spec: ShapeSpec) -> ImageInput:
    img = blank_image(spec.height, spec.width, (0.0, 0.0, 0.0))
    color = COLORS[spec.color_name]
    h, w = spec.height, spec.width
    if spec.shape == "square":
        side = max(2, min(h, w) // 2)
        y0, x0 = (h - side) // 2, (w - side) // 2
        draw_rectangle(img, y0, x0, y0 + side, x0 + side, color)
    else:
        draw_disk(img, (h - 1) / 2.0, (w - 1) / 2.0,
                  max(1.0, min(h, w) / 4.0), color)
    return img


def _frame_positions(direction: str, extent: int, n_frames: int) -> list[int]:
    step = max(1, extent // (n_frames + 1))
    return [step * (i + 1) for i in range(n_frames)]


def draw_motion_frames(spec: ShapeSpec, direction: str,
                       n_frames: int = 3) -> list[ImageInput]:
    """Same shape drawn at positions advancing along one axis."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    color = COLORS[spec.color_name]
    h, w = spec.height, spec.width
    frames = []
    axis_extent = w if direction == "right" else h
    for pos in _frame_positions(direction, axis_extent, n_frames):
        img = blank_image(h, w, (0.0, 0.0, 0.0))
        cy, cx = (h // 2, pos) if direction == "right" else (pos, w // 2)
        if spec.shape == "square":
            side = max(2, min(h, w) // 4)
            draw_rectangle(img, cy - side // 2, cx - side // 2,
                           cy - side // 2 + side, cx - side // 2 + side, color)
        else:
            draw_disk(img, cy, cx, max(1.0, min(h, w) / 8.0), color)
        frames.append(img)
    return frames


def _page_image(rng: np.random.Generator) -> tuple[ImageInput, int]:
    """A document-page look-alike: white sheet with dark text-like bars."""
    h = int(rng.integers(48, 80))
    w = int(rng.integers(36, 64))
    img = blank_image(h, w, (1.0, 1.0, 1.0))
    y, n_lines = 6, 0
    while y + 3 < h - 4:
        line_w = int(rng.integers(w // 2, w - 8))
        draw_rectangle(img, y, 4, y + 2, 4 + line_w, (0.1, 0.1, 0.1))
        y += 6
        n_lines += 1
    return img, n_lines


# -- the corpus ------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_clusters: int = 3
    language_docs_per_cluster: int = 4
    n_caption_docs: int = 6
    n_interleaved_docs: int = 4
    n_document_qa: int = 2
    n_video_qa: int = 2
    min_image_side: int = 32
    max_image_side: int = 96

    def __post_init__(self):
        if not 1 <= self.n_clusters <= MAX_TOPICS:
            raise ValueError(f"n_clusters must be in 1..{MAX_TOPICS}")
        if self.min_image_side < 8 or self.max_image_side < self.min_image_side:
            raise ValueError("bad image side range")


@dataclass
class ToyCorpus:
    documents: list[Document]
    images: dict[str, ImageInput]
    topic_of_doc: dict[str, int]          # only language docs are planted
    shape_of_image: dict[str, ShapeSpec] = field(default_factory=dict)

    def language_documents(self) -> list[Document]:
        return [d for d in self.documents if d.source_tag == "language"]


def _random_shape(rng: np.random.Generator, spec: CorpusSpec) -> ShapeSpec:
    return ShapeSpec(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        color_name=list(COLORS)[int(rng.integers(len(COLORS)))],
        height=int(rng.integers(spec.min_image_side, spec.max_image_side + 1)),
        width=int(rng.integers(spec.min_image_side, spec.max_image_side + 1)))


def _topic_sentences(rng: np.random.Generator, topic: int) -> list[str]:
    """Shuffled passes over the topic vocabulary, plus one partial pass.

    Per-word counts in a document differ by at most 1, which bounds
    intra-topic cosine below by (8a²+2a)/(8a²+2a+1) ≥ 10/11 for a ≥ 1
    full passes — the clustering margin never depends on luck.
    """
    vocab = topic_vocabulary(topic)
    sentences = []
    for _ in range(int(rng.integers(1, 4))):
        sentences.append(" ".join(vocab[i]
                                  for i in rng.permutation(len(vocab))))
    if rng.random() < 0.5:
        prefix = rng.permutation(len(vocab))[:int(rng.integers(4, 8))]
        sentences.append(" ".join(vocab[i] for i in prefix))
    return sentences


def generate_toy_corpus(spec: CorpusSpec) -> ToyCorpus:
    rng = np.random.default_rng(spec.seed)
    documents: list[Document] = []
    images: dict[str, ImageInput] = {}
    topic_of_doc: dict[str, int] = {}
    shape_of_image: dict[str, ShapeSpec] = {}

    def add_image(ref: str, img: ImageInput,
                  shape: ShapeSpec | None = None) -> None:
        images[ref] = img
        if shape is not None:
            shape_of_image[ref] = shape

    for topic in range(spec.n_clusters):
        for i in range(spec.language_docs_per_cluster):
            doc_id = f"lang-t{topic}-{i:03d}"
            segments = [text_segment(s)
                        for s in _topic_sentences(rng, topic)]
            documents.append(Document(doc_id=doc_id, segments=segments,
                                      source_tag="language"))
            topic_of_doc[doc_id] = topic

    for i in range(spec.n_caption_docs):
        shape = _random_shape(rng, spec)
        ref = f"images/cap-{i:03d}.ppm"
        add_image(ref, draw_shape(shape), shape)
        documents.append(Document(
            doc_id=f"cap-{i:03d}",
            segments=[image_segment(ref, alt_text=caption_for(shape)),
                      text_segment(caption_for(shape))],
            source_tag="caption"))

    for i in range(spec.n_interleaved_docs):
        shape = _random_shape(rng, spec)
        ref = f"images/web-{i:03d}.ppm"
        add_image(ref, draw_shape(shape), shape)
        caption = caption_for(shape)
        lead = f"the page shows {caption} next to the article"
        tail = "readers sent thirty letters about the layout"
        documents.append(Document(
            doc_id=f"web-{i:03d}",
            segments=[text_segment(lead),
                      image_segment(ref, alt_text=caption),
                      text_segment(tail)],
            source_tag="web-interleaved"))

    for i in range(spec.n_document_qa):
        ref = f"images/page-{i:03d}.ppm"
        page, n_lines = _page_image(rng)
        add_image(ref, page)
        documents.append(Document(
            doc_id=f"docqa-{i:03d}",
            segments=[image_segment(ref, alt_text="a printed page of text"),
                      text_segment("how many lines does the page hold"),
                      text_segment(f"the page holds {n_lines} lines")],
            source_tag="document-qa"))

    for i in range(spec.n_video_qa):
        shape = _random_shape(rng, spec)
        direction = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
        frames = draw_motion_frames(shape, direction)
        segments = []
        for f, frame in enumerate(frames):
            ref = f"images/vid-{i:03d}-f{f}.ppm"
            add_image(ref, frame, shape)
            segments.append(image_segment(
                ref, alt_text=f"frame {f} of a moving {shape.color_name} "
                              f"{shape.shape}"))
        segments.append(text_segment("which way does the shape move"))
        segments.append(text_segment(f"the shape moves {direction}"))
        documents.append(Document(doc_id=f"vidqa-{i:03d}", segments=segments,
                                  source_tag="video-qa"))

    return ToyCorpus(documents=documents, images=images,
                     topic_of_doc=topic_of_doc,
                     shape_of_image=shape_of_image)


COPY_ALPHABET = "abcdefghijklmnop"


def generate_copy_corpus(seed: int = 0, n_docs: int = 32,
                         pattern_length: int = 8,
                         repeats: int = 6) -> list[Document]:
    """Documents of one byte pattern repeated: predictable after one period."""
    if n_docs < 1 or pattern_length < 1 or repeats < 1:
        raise ValueError("copy corpus needs positive sizes")
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        draw = rng.integers(0, len(COPY_ALPHABET), size=pattern_length)
        pattern = "".join(COPY_ALPHABET[int(k)] for k in draw)
        docs.append(Document(doc_id=f"copy-{i:03d}",
                             segments=[text_segment(pattern * repeats)],
                             source_tag="language"))
    return docs
