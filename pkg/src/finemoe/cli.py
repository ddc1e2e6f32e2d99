"""Command-line entry point for the full pipeline.

One executable with subcommands: ``gen-corpus`` writes a synthetic
multimodal corpus, ``pack`` clusters and packs it into training
sequences, ``train`` runs one training stage, ``analyze`` renders
expert-specialization heatmaps from routing traces, ``eval-niah`` runs
the needle-in-a-haystack retrieval grid, and ``params`` prints the
parameter-count reports.

A config file (``--config``) holds flat ``key = value`` lines under
bracketed sections: ``[global]`` for the shared flags plus one section
per subcommand, e.g.::

    [global]
    seed = 3
    out = runs/demo

    [train]
    stage = language-pretrain
    budget = 20000

Command-line flags override config-file values.  Exit codes: 0 success,
1 runtime failure, 2 usage error.  Every run is reproducible given the
same flags and seed.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys

from .analysis import (
    DOMAIN_TAGS,
    ActivationCounter,
    compute_specialization,
    export_heatmap,
    record_routing,
)
from .corpus import CorpusSpec, ToyCorpus, generate_toy_corpus
from .data import (
    BagOfWordsOracle,
    CorpusStore,
    mst_cluster,
    pack_sequences,
    write_packs,
)
from .decoder import MoEDecoder, desk_preset
from .evaluation import (
    RetrievalOracle,
    generate_grid,
    run_parameter_report,
    score_niah,
)
from .moe import read_trace
from .tokenizer import ByteTokenizer
from .training import (
    STAGE_TAGS,
    CheckpointError,
    checkpoint_load,
    default_stages,
    read_checkpoint_header,
    train_stage,
)
from .vision import VisionConfig, VisionEncoder, visual_token_count

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_LOG = logging.getLogger("finemoe")


class UsageError(ValueError):
    """Bad flags or config values; maps to exit code 2."""


# -- flag / config resolution ----------------------------------------------

@dataclasses.dataclass
class Settings:
    seed: int
    out: str | None
    threads: int
    log_level: str


def _load_config(path) -> configparser.ConfigParser:
    config = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file {path} not found")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                config.read_file(fh)
        except configparser.Error as exc:
            raise UsageError(f"malformed config file: {exc}")
    return config


def _resolve(args, config, section: str, key: str, cast, default):
    """Flag value if given, else config-file value, else the default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if config.has_option(section, key):
        raw = config.get(section, key)
        try:
            return cast(raw)
        except ValueError:
            raise UsageError(
                f"config [{section}] {key} = {raw!r}: not a valid "
                f"{cast.__name__}")
    return default


def _settings(args, config) -> Settings:
    seed = _resolve(args, config, "global", "seed", int, 0)
    if seed < 0:
        raise UsageError("--seed must be nonnegative")
    threads = _resolve(args, config, "global", "threads", int, 1)
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    level = _resolve(args, config, "global", "log-level", str, "warning")
    if level not in ("debug", "info", "warning", "error"):
        raise UsageError(f"unknown log level {level!r}")
    out = _resolve(args, config, "global", "out", str, None)
    return Settings(seed=seed, out=out, threads=threads, log_level=level)


def _require_out(settings: Settings) -> str:
    if settings.out is None:
        raise UsageError("--out is required for this command")
    return settings.out


# -- shared helpers --------------------------------------------------------

def _load_corpus(corpus_dir) -> ToyCorpus:
    store = CorpusStore(corpus_dir)
    manifest = os.path.join(store.root, CorpusStore.MANIFEST)
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    documents = store.load_documents()
    images = {}
    for doc in documents:
        for ref in doc.image_refs():
            if ref not in images:
                images[ref] = store.load_image(ref)
    return ToyCorpus(documents=documents, images=images, topic_of_doc={})


def _cluster_for_packing(corpus: ToyCorpus, cut_threshold: float):
    """Language documents cluster by text similarity; every other source
    tag forms one cluster (alignment already groups those documents)."""
    by_tag: dict = {}
    for doc in sorted(corpus.documents, key=lambda d: d.doc_id):
        by_tag.setdefault(doc.source_tag, []).append(doc)
    clusters: list = []
    for tag in sorted(by_tag):
        docs = by_tag[tag]
        if tag == "language":
            labels = mst_cluster([d.text() for d in docs],
                                 BagOfWordsOracle(), cut_threshold)
            groups: list = [[] for _ in range(max(labels) + 1)]
            for doc, label in zip(docs, labels):
                groups[label].append(doc)
            clusters.extend(groups)
        else:
            clusters.append(docs)
    cluster_of_doc = {doc.doc_id: index
                      for index, docs in enumerate(clusters) for doc in docs}
    return clusters, cluster_of_doc


def _cli_vision_config(output_dim: int, queries: int, patch: int) -> VisionConfig:
    """Training-speed vision geometry: coarse patches and few queries so
    images cost a handful of context tokens and encode in milliseconds."""
    return VisionConfig(output_dim=output_dim, patch_size=patch,
                        n_queries_base=queries, n_queries_high_extra=queries)


# -- subcommands -----------------------------------------------------------

def _cmd_gen_corpus(args, config, settings: Settings) -> int:
    out = _require_out(settings)

    def opt(key, default):
        value = _resolve(args, config, "gen-corpus", key, int, default)
        return int(value)

    try:
        spec = CorpusSpec(
            seed=settings.seed,
            n_clusters=opt("clusters", 3),
            language_docs_per_cluster=opt("docs-per-cluster", 4),
            n_caption_docs=opt("captions", 6),
            n_interleaved_docs=opt("interleaved", 4),
            n_document_qa=opt("document-qa", 2),
            n_video_qa=opt("video-qa", 2))
    except ValueError as exc:
        raise UsageError(str(exc))
    corpus = generate_toy_corpus(spec)
    CorpusStore(out).save(corpus.documents, corpus.images)
    print(f"wrote {len(corpus.documents)} documents and "
          f"{len(corpus.images)} images to {out}")
    return EXIT_OK


def _cmd_pack(args, config, settings: Settings) -> int:
    corpus_dir = _resolve(args, config, "pack", "corpus", str, None)
    if corpus_dir is None:
        raise UsageError("--corpus is required for pack")
    context_len = _resolve(args, config, "pack", "context-len", int, 512)
    if context_len < 2:
        raise UsageError("--context-len must be at least 2")
    cut = _resolve(args, config, "pack", "cut-threshold", float, 0.5)
    queries = _resolve(args, config, "pack", "vision-queries", int, 16)
    out = _require_out(settings)

    corpus = _load_corpus(corpus_dir)
    clusters, cluster_of_doc = _cluster_for_packing(corpus, cut)
    vision_config = _cli_vision_config(desk_preset().hidden_dim, queries, 70)

    def image_tokens(ref: str) -> int:
        img = corpus.images[ref]
        return visual_token_count(img.height, img.width, vision_config)

    packs, report = pack_sequences(clusters, ByteTokenizer(), context_len,
                                   image_token_count=image_tokens)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "packs.fmpk")
    write_packs(path, packs, context_len)

    pure = sum(1 for p in packs
               if all(cluster_of_doc[d] == p.cluster_id
                      for d in p.member_doc_ids))
    print(f"wrote {len(packs)} packs to {path}")
    print(f"purity: {pure}/{len(packs)} packs draw from a single cluster")
    print(f"token conservation: "
          f"{'ok' if report.conserved() else 'VIOLATED'} "
          f"({report.total_packed_tokens} packed + {report.tokens_lost} "
          f"lost of {report.total_corpus_tokens} corpus tokens)")
    if pure != len(packs) or not report.conserved():
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_train(args, config, settings: Settings) -> int:
    stage_name = _resolve(args, config, "train", "stage", str, None)
    if stage_name is None:
        raise UsageError("--stage is required for train")
    if stage_name not in STAGE_TAGS:
        raise UsageError(f"unknown stage {stage_name!r}; "
                         f"choose from {', '.join(STAGE_TAGS)}")
    corpus_dir = _resolve(args, config, "train", "corpus", str, None)
    if corpus_dir is None:
        raise UsageError("--corpus is required for train")
    budget = _resolve(args, config, "train", "budget", int, None)
    if budget is not None and budget < 0:
        raise UsageError("--budget must be nonnegative")
    resume = _resolve(args, config, "train", "resume", str, None)
    cut = _resolve(args, config, "train", "cut-threshold", float, 0.5)
    queries = _resolve(args, config, "train", "vision-queries", int, 16)
    patch = _resolve(args, config, "train", "vision-patch", int, 70)
    out = _require_out(settings)

    stage = next(s for s in default_stages() if s.tag == stage_name)
    if budget is not None:
        stage = dataclasses.replace(stage, token_budget=budget)

    corpus = _load_corpus(corpus_dir)
    decoder_config = desk_preset().with_context(stage.context_length,
                                                stage.rope_base)
    if resume is not None:
        header = read_checkpoint_header(resume)
        saved_vision = header.get("vision_config")
        vision_config = None if saved_vision is None \
            else VisionConfig(**saved_vision)
        model, vision, _, _ = checkpoint_load(resume, decoder_config,
                                              vision_config)
        if vision is None:
            vision = VisionEncoder(
                _cli_vision_config(decoder_config.hidden_dim, queries, patch),
                seed=settings.seed)
        _LOG.info("resumed %s (stage %s, step %s)", resume,
                  header["stage"], header["step"])
    else:
        model = MoEDecoder(decoder_config, seed=settings.seed)
        vision = VisionEncoder(
            _cli_vision_config(decoder_config.hidden_dim, queries, patch),
            seed=settings.seed)

    report = train_stage(model, stage, corpus, seed=settings.seed,
                         out_dir=out, vision=vision,
                         train_vision=stage_name != "language-pretrain",
                         cut_threshold=cut)
    final = report.loss_curve[-1] if report.loss_curve else float("nan")
    print(f"stage {report.stage}: {report.n_steps} steps, "
          f"{report.tokens_consumed} tokens, final loss {final:.4f}")
    print(f"checkpoint: {report.checkpoint_path}")
    if report.diverged:
        print("stage diverged; the checkpoint holds the last finite step",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_analyze(args, config, settings: Settings) -> int:
    traces = getattr(args, "trace", None)
    if not traces and config.has_option("analyze", "trace"):
        traces = config.get("analyze", "trace").split()
    if not traces:
        raise UsageError("--trace is required for analyze "
                         "(one or more trace files)")
    cap = _resolve(args, config, "analyze", "cap", float, 50.0)
    if cap <= 0:
        raise UsageError("--cap must be positive")
    domain = _resolve(args, config, "analyze", "domain", str, "natural-image")
    if domain not in DOMAIN_TAGS:
        raise UsageError(f"unknown domain {domain!r}; "
                         f"choose from {', '.join(DOMAIN_TAGS)}")
    out = _require_out(settings)

    counter = None
    n_records = 0
    for path in traces:
        records = read_trace(path)
        for record in records:
            if counter is None:
                counter = ActivationCounter(record.n_routed)
            record_routing(counter, record)
        n_records += len(records)
    if counter is None:
        raise ValueError("no routing records found in the given traces")
    matrix = compute_specialization(counter, cap=cap, domain=domain)

    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "specialization.csv")
    svg_path = os.path.join(out, "specialization.svg")
    export_heatmap(matrix, csv_path, svg_path)
    skipped = ", ".join(f"L{layer}: {reason}" for layer, reason
                        in sorted(matrix.skipped_layers.items())) or "none"
    print(f"replayed {n_records} routing records from "
          f"{len(traces)} trace file(s)")
    print(f"layers reported: {matrix.layers()}; skipped: {skipped}")
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def _parse_number_list(raw, cast, flag: str):
    try:
        values = tuple(cast(piece) for piece
                       in str(raw).replace(",", " ").split())
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated "
                         f"{cast.__name__} values, got {raw!r}")
    if not values:
        raise UsageError(f"{flag} must list at least one value")
    return values


def _cmd_eval_niah(args, config, settings: Settings) -> int:
    lengths = _parse_number_list(
        _resolve(args, config, "eval-niah", "lengths", str,
                 "512,1024,2048,4096"), int, "--lengths")
    depths = _parse_number_list(
        _resolve(args, config, "eval-niah", "depths", str,
                 "0,0.25,0.5,0.75,1"), float, "--depths")
    per_cell = _resolve(args, config, "eval-niah", "cases-per-cell", int, 1)
    if per_cell < 1:
        raise UsageError("--cases-per-cell must be at least 1")
    checkpoint = _resolve(args, config, "eval-niah", "checkpoint", str, None)
    out = _require_out(settings)
    os.makedirs(out, exist_ok=True)

    cases = generate_grid(lengths, depths, per_cell, seed=settings.seed)
    oracle_report = score_niah(RetrievalOracle(), cases)
    oracle_report.save(os.path.join(out, "niah-oracle.json"),
                       os.path.join(out, "niah-oracle.csv"))
    print(f"retrieval oracle accuracy: {oracle_report.overall():g} "
          f"over {len(cases)} cases")
    if oracle_report.overall() != 1.0:
        print("harness invalid: the retrieval oracle must score 1.0",
              file=sys.stderr)
        return EXIT_RUNTIME

    if checkpoint is not None:
        header = read_checkpoint_header(checkpoint)
        decoder_config = desk_preset().with_context(
            int(header["context_length"]), float(header["rope_base"]))
        saved_vision = header.get("vision_config")
        vision_config = None if saved_vision is None \
            else VisionConfig(**saved_vision)
        model, _, _, _ = checkpoint_load(checkpoint, decoder_config,
                                         vision_config)
        model_report = score_niah(model, cases)
        model_report.save(os.path.join(out, "niah-model.json"),
                          os.path.join(out, "niah-model.csv"))
        print(f"model accuracy grid (stage {header['stage']}, "
              f"step {header['step']}):")
        print(model_report.grid_csv(), end="")
    return EXIT_OK


def _cmd_params(args, config, settings: Settings) -> int:
    reports = run_parameter_report(printer=print)
    if settings.out is not None:
        os.makedirs(settings.out, exist_ok=True)
        for name, report in reports.items():
            report.write_files(
                os.path.join(settings.out, f"params-{name}.txt"),
                os.path.join(settings.out, f"params-{name}.json"))
    return EXIT_OK


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "pack": _cmd_pack,
    "train": _cmd_train,
    "analyze": _cmd_analyze,
    "eval-niah": _cmd_eval_niah,
    "params": _cmd_params,
}


# -- parser / entry --------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key-value config file; flags override it")
    common.add_argument("--seed", type=int, metavar="N",
                        help="root RNG seed (default 0)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, metavar="N",
                        help="upper bound on worker parallelism (all "
                             "current pipelines run single-threaded)")
    common.add_argument("--log-level",
                        choices=("debug", "info", "warning", "error"))

    parser = argparse.ArgumentParser(
        prog="finemoe",
        description="desk-scale multimodal mixture-of-experts toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="write a synthetic multimodal corpus directory")
    p.add_argument("--clusters", type=int, metavar="N",
                   help="planted language topic clusters (default 3)")
    p.add_argument("--docs-per-cluster", type=int, metavar="N")
    p.add_argument("--captions", type=int, metavar="N")
    p.add_argument("--interleaved", type=int, metavar="N")
    p.add_argument("--document-qa", type=int, metavar="N")
    p.add_argument("--video-qa", type=int, metavar="N")

    p = sub.add_parser("pack", parents=[common],
                       help="cluster a corpus and pack it into sequences")
    p.add_argument("--corpus", metavar="DIR")
    p.add_argument("--context-len", type=int, metavar="N",
                   help="pack capacity in tokens (default 512)")
    p.add_argument("--cut-threshold", type=float, metavar="X",
                   help="similarity below which clusters split (default 0.5)")
    p.add_argument("--vision-queries", type=int, metavar="N",
                   help="context tokens per base-tier image (default 16)")

    p = sub.add_parser("train", parents=[common],
                       help="run one training stage on a corpus")
    p.add_argument("--stage", choices=STAGE_TAGS)
    p.add_argument("--corpus", metavar="DIR")
    p.add_argument("--budget", type=int, metavar="TOKENS",
                   help="token-budget override for the stage")
    p.add_argument("--resume", metavar="CKPT",
                   help="checkpoint to continue from")
    p.add_argument("--cut-threshold", type=float, metavar="X")
    p.add_argument("--vision-queries", type=int, metavar="N")
    p.add_argument("--vision-patch", type=int, metavar="N",
                   help="vision patch size (default 70; coarse = fast)")

    p = sub.add_parser("analyze", parents=[common],
                       help="expert-specialization heatmaps from traces")
    p.add_argument("--trace", nargs="+", metavar="FILE")
    p.add_argument("--cap", type=float, metavar="X",
                   help="specialization ratio cap (default 50)")
    p.add_argument("--domain", choices=DOMAIN_TAGS)

    p = sub.add_parser("eval-niah", parents=[common],
                       help="needle-in-a-haystack retrieval grid")
    p.add_argument("--lengths", metavar="L1,L2,…")
    p.add_argument("--depths", metavar="D1,D2,…")
    p.add_argument("--cases-per-cell", type=int, metavar="N")
    p.add_argument("--checkpoint", metavar="CKPT",
                   help="also score this model by greedy decoding")

    sub.add_parser("params", parents=[common],
                   help="parameter-count reports for the built-in presets")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        config = _load_config(getattr(args, "config", None))
        settings = _settings(args, config)
        logging.basicConfig(
            level=getattr(logging, settings.log_level.upper()),
            format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](args, config, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint integrity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        _LOG.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
