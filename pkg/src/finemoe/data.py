"""Data curation and packing.

Documents are clustered by similarity (complete-graph minimum spanning
tree with a cut threshold), packed greedily into context-bounded
sequences that never mix clusters, and interleaved image-text documents
are filtered and repositioned with a text-proxy similarity oracle
standing in for an image-text matching model.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .images import ImageInput, read_ppm, write_ppm
from .moe import MODALITY_TEXT, MODALITY_VISUAL
from .tokenizer import ByteTokenizer

SOURCE_TAGS = ("web-interleaved", "caption", "document-qa", "video-qa",
               "language")

REASON_LOW_SCORE = "low-overall-score"
REASON_DUPLICATE = "duplicate-image"

_PACK_MAGIC = b"FMPK"
_PACK_VERSION = 1


# -- documents -------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """One document unit: either a text sentence or an image reference.

    ``alt_text`` is the image's text proxy (rule-derived description);
    the similarity oracle scores it against sentences in place of a
    learned image-text model.
    """

    kind: str                      # "text" | "image"
    text: str = ""
    image_ref: str = ""
    alt_text: str = ""

    def __post_init__(self):
        if self.kind == "text":
            if self.image_ref or self.alt_text:
                raise ValueError("text segment with image fields")
        elif self.kind == "image":
            if not self.image_ref:
                raise ValueError("image segment without a reference")
            if self.text:
                raise ValueError("image segment with text payload")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")


def text_segment(text: str) -> Segment:
    return Segment(kind="text", text=text)


def image_segment(image_ref: str, alt_text: str = "") -> Segment:
    return Segment(kind="image", image_ref=image_ref, alt_text=alt_text)


@dataclass(frozen=True)
class Document:
    doc_id: str
    segments: tuple
    source_tag: str

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError(f"document {self.doc_id} has no segments")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {self.source_tag!r}")

    def text(self) -> str:
        return " ".join(s.text for s in self.segments if s.kind == "text")

    def image_refs(self) -> list[str]:
        return [s.image_ref for s in self.segments if s.kind == "image"]


# -- similarity oracles ----------------------------------------------------

class SimilarityOracle:
    """score(a, b) -> float in [-1, 1]; symmetric; score(x, x) == 1."""

    def score(self, a, b) -> float:
        raise NotImplementedError


class BagOfWordsOracle(SimilarityOracle):
    """Cosine similarity of whitespace-token count vectors."""

    @staticmethod
    def _counts(text: str) -> Counter:
        return Counter(text.lower().split())

    def score(self, a: str, b: str) -> float:
        ca, cb = self._counts(a), self._counts(b)
        if not ca or not cb:
            return 1.0 if ca == cb else 0.0
        dot = sum(ca[w] * cb[w] for w in ca.keys() & cb.keys())
        na = math.sqrt(sum(v * v for v in ca.values()))
        nb = math.sqrt(sum(v * v for v in cb.values()))
        return dot / (na * nb)


class EmbeddingFileOracle(SimilarityOracle):
    """Cosine similarity of precomputed unit-free vectors keyed by id.

    File format: JSON object mapping key -> list of floats.
    """

    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        self._vectors = {k: np.asarray(v, dtype=np.float64)
                         for k, v in table.items()}

    def score(self, a, b) -> float:
        try:
            va, vb = self._vectors[a], self._vectors[b]
        except KeyError as exc:
            raise KeyError(f"no embedding for key {exc.args[0]!r}") from None
        denom = np.linalg.norm(va) * np.linalg.norm(vb)
        if denom == 0.0:
            return 0.0
        return float(np.dot(va, vb) / denom)


# -- MST clustering --------------------------------------------------------

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def mst_cluster(items: list, oracle: SimilarityOracle,
                cut_threshold: float) -> list[int]:
    """Cluster by cutting long edges out of the minimum spanning tree.

    Edge weight is 1 - score.  Kruskal's algorithm with ties broken by
    the lower (i, j) pair; MST edges with weight > 1 - cut_threshold are
    removed and the surviving connected components are the clusters.
    Cluster ids are numbered by first appearance in item order.
    """
    n = len(items)
    if n == 0:
        raise ValueError("mst_cluster needs at least one item")
    if not -1.0 <= cut_threshold <= 1.0:
        raise ValueError(f"cut_threshold {cut_threshold} outside [-1, 1]")
    edges = sorted(
        (1.0 - oracle.score(items[i], items[j]), i, j)
        for i in range(n) for j in range(i + 1, n))
    limit = 1.0 - cut_threshold

    uf_mst = _UnionFind(n)
    uf_cut = _UnionFind(n)
    taken = 0
    for w, i, j in edges:
        if uf_mst.union(i, j):
            taken += 1
            if w <= limit:
                uf_cut.union(i, j)
            if taken == n - 1:
                break

    labels, order = [], {}
    for i in range(n):
        root = uf_cut.find(i)
        if root not in order:
            order[root] = len(order)
        labels.append(order[root])
    return labels


# -- packing ---------------------------------------------------------------

@dataclass
class PackedSequence:
    """One training sequence: tokens with modality / loss masks.

    ``image_spans`` lists (image_ref, start, length) for each run of
    visual placeholder positions.  ``loss_mask`` marks positions whose
    next-token prediction counts toward the loss (text and separators).
    """

    token_ids: np.ndarray
    modality_mask: np.ndarray
    loss_mask: np.ndarray
    member_doc_ids: list[str]
    cluster_id: int
    image_spans: list[tuple[str, int, int]] = field(default_factory=list)
    truncated_doc_ids: list[str] = field(default_factory=list)
    tokens_lost: int = 0

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.modality_mask = np.asarray(self.modality_mask, dtype=np.uint8)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.uint8)
        if not (len(self.token_ids) == len(self.modality_mask)
                == len(self.loss_mask)):
            raise ValueError("packed sequence masks must match token length")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class PackingReport:
    total_corpus_tokens: int = 0
    total_packed_tokens: int = 0       # non-separator tokens in packs
    total_separator_tokens: int = 0
    tokens_lost: int = 0
    n_packs: int = 0
    n_truncated_docs: int = 0

    def conserved(self) -> bool:
        return self.total_packed_tokens + self.tokens_lost \
            == self.total_corpus_tokens


def _tokenize_document(doc: Document, tokenizer: ByteTokenizer,
                       image_token_count) -> tuple[list[int], list[int],
                                                   list[tuple[str, int, int]]]:
    """Token ids + modality per position + image spans for one document."""
    ids: list[int] = []
    modality: list[int] = []
    spans: list[tuple[str, int, int]] = []
    for seg in doc.segments:
        if seg.kind == "text":
            t = tokenizer.encode(seg.text)
            ids.extend(t)
            modality.extend([MODALITY_TEXT] * len(t))
        else:
            n = int(image_token_count(seg.image_ref))
            if n < 1:
                raise ValueError(f"image {seg.image_ref} maps to {n} tokens")
            spans.append((seg.image_ref, len(ids), n))
            ids.extend([tokenizer.IMG] * n)
            modality.extend([MODALITY_VISUAL] * n)
    return ids, modality, spans


def _truncate_document(ids, modality, spans, limit: int):
    """Cut to ``limit`` tokens without splitting an image span."""
    cut = limit
    for ref, start, length in spans:
        if start < cut < start + length:
            cut = start
            break
    kept_spans = [s for s in spans if s[1] + s[2] <= cut]
    return ids[:cut], modality[:cut], kept_spans, len(ids) - cut


class _OpenPack:
    def __init__(self, cluster_id: int):
        self.cluster_id = cluster_id
        self.ids: list[int] = []
        self.modality: list[int] = []
        self.doc_ids: list[str] = []
        self.spans: list[tuple[str, int, int]] = []
        self.truncated: list[str] = []
        self.lost = 0


def pack_sequences(clusters: list[list[Document]], tokenizer: ByteTokenizer,
                   context_length: int,
                   image_token_count=lambda ref: 1
                   ) -> tuple[list[PackedSequence], PackingReport]:
    """Greedy first-fit packing, never mixing clusters.

    Each document is followed by one separator token.  A document that
    cannot fit even in an empty pack is truncated and flagged.  Returns
    the packs plus a token-conservation report.
    """
    if context_length < 2:
        raise ValueError("context_length must fit at least one token "
                         "plus a separator")
    if not any(cluster for cluster in clusters):
        raise ValueError("empty corpus: nothing to pack")

    report = PackingReport()
    packs: list[PackedSequence] = []
    for cluster_id, docs in enumerate(clusters):
        open_packs: list[_OpenPack] = []
        for doc in docs:
            ids, modality, spans = _tokenize_document(
                doc, tokenizer, image_token_count)
            report.total_corpus_tokens += len(ids)
            truncated, lost = False, 0
            if len(ids) + 1 > context_length:
                ids, modality, spans, lost = _truncate_document(
                    ids, modality, spans, context_length - 1)
                truncated = True
            need = len(ids) + 1
            target = None
            for cand in open_packs:
                if len(cand.ids) + need <= context_length:
                    target = cand
                    break
            if target is None:
                target = _OpenPack(cluster_id)
                open_packs.append(target)
            offset = len(target.ids)
            target.ids.extend(ids)
            target.ids.append(tokenizer.SEP)
            target.modality.extend(modality)
            target.modality.append(MODALITY_TEXT)
            target.doc_ids.append(doc.doc_id)
            target.spans.extend((ref, start + offset, length)
                                for ref, start, length in spans)
            if truncated:
                target.truncated.append(doc.doc_id)
                target.lost += lost

        for p in open_packs:
            modality_arr = np.array(p.modality, dtype=np.uint8)
            packs.append(PackedSequence(
                token_ids=np.array(p.ids, dtype=np.int64),
                modality_mask=modality_arr,
                loss_mask=(modality_arr == MODALITY_TEXT).astype(np.uint8),
                member_doc_ids=p.doc_ids, cluster_id=p.cluster_id,
                image_spans=p.spans, truncated_doc_ids=p.truncated,
                tokens_lost=p.lost))
            report.total_separator_tokens += len(p.doc_ids)
            report.total_packed_tokens += len(p.ids) - len(p.doc_ids)
            report.tokens_lost += p.lost
            report.n_truncated_docs += len(p.truncated)
    report.n_packs = len(packs)
    return packs, report


# -- interleaved filtering / repositioning ---------------------------------

@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None
    overall_score: float = 0.0


def filter_interleaved(doc: Document, oracle: SimilarityOracle,
                       min_score: float,
                       image_bytes=None) -> FilterDecision:
    """Keep or reject one interleaved document.

    Overall score = mean over images of the best sentence score for that
    image.  Exact duplicate images (byte hash when ``image_bytes`` is
    given, reference equality otherwise) reject the document outright.
    """
    images = [s for s in doc.segments if s.kind == "image"]
    if not images:
        raise ValueError(f"document {doc.doc_id} has no images to filter")
    seen = set()
    for seg in images:
        key = (hashlib.sha256(image_bytes(seg.image_ref)).hexdigest()
               if image_bytes is not None else seg.image_ref)
        if key in seen:
            return FilterDecision(keep=False, reason=REASON_DUPLICATE)
        seen.add(key)

    sentences = [s.text for s in doc.segments if s.kind == "text"]
    per_image = []
    for seg in images:
        best = max((oracle.score(seg.alt_text, s) for s in sentences),
                   default=0.0)
        per_image.append(best)
    overall = sum(per_image) / len(per_image)
    if overall < min_score:
        return FilterDecision(keep=False, reason=REASON_LOW_SCORE,
                              overall_score=overall)
    return FilterDecision(keep=True, overall_score=overall)


def reposition_images(doc: Document, oracle: SimilarityOracle) -> Document:
    """Move each image before its best-scoring preceding sentence.

    Single left-to-right pass.  An image moves only if its best preceding
    sentence scores strictly higher than the sentence immediately
    following the image (a missing following sentence never blocks the
    move).  Text order is never changed, which makes a second pass a
    no-op.
    """
    segments = list(doc.segments)
    image_ids = [id(s) for s in segments if s.kind == "image"]
    for mark in image_ids:
        pos = next(i for i, s in enumerate(segments) if id(s) == mark)
        img = segments[pos]
        prev_texts = [(i, s) for i, s in enumerate(segments[:pos])
                      if s.kind == "text"]
        if not prev_texts:
            continue
        best_idx, best_score = None, -math.inf
        for i, s in prev_texts:
            sc = oracle.score(img.alt_text, s.text)
            if sc > best_score:
                best_idx, best_score = i, sc
        following = next((s for s in segments[pos + 1:] if s.kind == "text"),
                         None)
        follow_score = (oracle.score(img.alt_text, following.text)
                        if following is not None else -math.inf)
        if best_score > follow_score:
            segments.pop(pos)
            segments.insert(best_idx, img)
    return replace(doc, segments=tuple(segments))


# -- synthetic long-context sequences --------------------------------------

def build_long_synthetic(pairs: list[tuple[str, str]], context_length: int,
                         tokenizer: ByteTokenizer,
                         image_token_count=lambda ref: 1) -> PackedSequence:
    """Images first, then their captions in the same order.

    The loss mask covers caption tokens (and their separators) only.
    Overflow truncates at pair granularity: a whole prefix of pairs is
    kept; the first pair must fit on its own.
    """
    if not pairs:
        raise ValueError("build_long_synthetic needs at least one pair")
    sizes = []
    for ref, caption in pairs:
        n_img = int(image_token_count(ref))
        n_cap = len(tokenizer.encode(caption)) + 1            # + separator
        sizes.append(n_img + n_cap)
    if sizes[0] > context_length:
        raise ValueError(
            f"first pair needs {sizes[0]} tokens, context is {context_length}")
    kept = 0
    total = 0
    for s in sizes:
        if total + s > context_length:
            break
        total += s
        kept += 1

    ids: list[int] = []
    modality: list[int] = []
    loss: list[int] = []
    spans: list[tuple[str, int, int]] = []
    for ref, _ in pairs[:kept]:
        n = int(image_token_count(ref))
        spans.append((ref, len(ids), n))
        ids.extend([tokenizer.IMG] * n)
        modality.extend([MODALITY_VISUAL] * n)
        loss.extend([0] * n)
    for _, caption in pairs[:kept]:
        t = tokenizer.encode(caption) + [tokenizer.SEP]
        ids.extend(t)
        modality.extend([MODALITY_TEXT] * len(t))
        loss.extend([1] * len(t))
    return PackedSequence(
        token_ids=np.array(ids, dtype=np.int64),
        modality_mask=np.array(modality, dtype=np.uint8),
        loss_mask=np.array(loss, dtype=np.uint8),
        member_doc_ids=[ref for ref, _ in pairs[:kept]],
        cluster_id=-1, image_spans=spans)


# -- packed-file and corpus-store I/O --------------------------------------

def write_packs(path, packs: list[PackedSequence], context_length: int) -> None:
    """Binary pack file: JSON header then raw little-endian arrays."""
    header = {
        "format_version": _PACK_VERSION,
        "context_length": context_length,
        "n_packs": len(packs),
        "packs": [
            {"length": len(p), "cluster_id": p.cluster_id,
             "member_doc_ids": p.member_doc_ids,
             "image_spans": [list(s) for s in p.image_spans],
             "truncated_doc_ids": p.truncated_doc_ids,
             "tokens_lost": p.tokens_lost}
            for p in packs],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PACK_MAGIC + struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in packs:
            fh.write(p.token_ids.astype("<i8").tobytes())
            fh.write(p.modality_mask.astype("<u1").tobytes())
            fh.write(p.loss_mask.astype("<u1").tobytes())


def read_packs(path) -> tuple[list[PackedSequence], int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _PACK_MAGIC:
        raise ValueError(f"{path}: not a pack file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header["format_version"] != _PACK_VERSION:
        raise ValueError(f"{path}: unsupported pack version")
    off = 8 + hlen
    packs = []
    for meta in header["packs"]:
        t = meta["length"]
        ids = np.frombuffer(blob, dtype="<i8", count=t, offset=off).copy()
        off += 8 * t
        modality = np.frombuffer(blob, dtype="<u1", count=t, offset=off).copy()
        off += t
        loss = np.frombuffer(blob, dtype="<u1", count=t, offset=off).copy()
        off += t
        packs.append(PackedSequence(
            token_ids=ids.astype(np.int64), modality_mask=modality,
            loss_mask=loss, member_doc_ids=list(meta["member_doc_ids"]),
            cluster_id=int(meta["cluster_id"]),
            image_spans=[tuple(s) for s in meta["image_spans"]],
            truncated_doc_ids=list(meta["truncated_doc_ids"]),
            tokens_lost=int(meta["tokens_lost"])))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return packs, int(header["context_length"])


class CorpusStore:
    """Directory layout: ``manifest.jsonl`` plus ``images/*.ppm``."""

    MANIFEST = "manifest.jsonl"
    IMAGE_DIR = "images"

    def __init__(self, root):
        self.root = os.fspath(root)

    def image_path(self, ref: str) -> str:
        return os.path.join(self.root, ref)

    def save(self, documents: list[Document],
             images: dict[str, ImageInput] | None = None) -> None:
        os.makedirs(os.path.join(self.root, self.IMAGE_DIR), exist_ok=True)
        for ref, img in (images or {}).items():
            write_ppm(self.image_path(ref), img)
        with open(os.path.join(self.root, self.MANIFEST), "w",
                  encoding="utf-8") as fh:
            for doc in documents:
                fh.write(json.dumps(self._doc_to_json(doc), sort_keys=True))
                fh.write("\n")

    @staticmethod
    def _doc_to_json(doc: Document) -> dict:
        segs = []
        for s in doc.segments:
            if s.kind == "text":
                segs.append({"kind": "text", "text": s.text})
            else:
                segs.append({"kind": "image", "ref": s.image_ref,
                             "alt_text": s.alt_text})
        return {"doc_id": doc.doc_id, "source_tag": doc.source_tag,
                "segments": segs}

    def load_documents(self) -> list[Document]:
        docs = []
        with open(os.path.join(self.root, self.MANIFEST), "r",
                  encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                raw = json.loads(line)
                segments = []
                for s in raw["segments"]:
                    if s["kind"] == "text":
                        segments.append(text_segment(s["text"]))
                    else:
                        segments.append(image_segment(s["ref"],
                                                      s.get("alt_text", "")))
                docs.append(Document(doc_id=raw["doc_id"], segments=segments,
                                     source_tag=raw["source_tag"]))
        for doc in docs:
            for ref in doc.image_refs():
                if not os.path.exists(self.image_path(ref)):
                    raise FileNotFoundError(
                        f"document {doc.doc_id}: missing image {ref}")
        return docs

    def load_image(self, ref: str) -> ImageInput:
        return read_ppm(self.image_path(ref))

    def image_bytes(self, ref: str) -> bytes:
        with open(self.image_path(ref), "rb") as fh:
            return fh.read()

    def image_size(self, ref: str) -> tuple[int, int]:
        img = self.load_image(ref)
        return img.height, img.width
