"""Command-line pipeline: validate -> train -> index -> generate -> evaluate,
plus random baselines. Diagnostics go to stderr, data to files, and every
run writes a manifest sufficient to reproduce it beside its output.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, fingerprint, load_checkpoint
from .corpus import (
    CorpusError,
    empirical_aa_distribution,
    fragment_type_histogram,
    load_corpus,
)
from .evaluation import (
    evaluate_designs,
    random_empirical,
    random_plus,
    random_uniform,
    render_table,
)
from .generation import (
    GenerationParams,
    design_record,
    generate,
    generate_unconditional,
    load_designs,
    write_designs,
)
from .model import ModelConfig
from .retrieval import (
    ModelTextEmbedder,
    RetrievalError,
    build_index,
    docs_from_corpus,
    load_index,
    save_index,
)
from .training import TrainConfig, TrainingError, train


def _eprint(message: str) -> None:
    print(message, file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_manifest(anchor: Path, manifest: dict) -> None:
    manifest = dict(manifest, version=__version__)
    if anchor.is_dir():
        path = anchor / "run.manifest.json"
    else:
        path = anchor.with_name(anchor.name + ".manifest.json")
    _write_json(path, manifest)


def cmd_validate(args: argparse.Namespace) -> int:
    records = load_corpus(args.corpus)
    histogram = fragment_type_histogram(records)
    lengths = [len(r.sequence) for r in records]
    report = {
        "records": len(records),
        "total_fragments": sum(histogram.values()),
        "fragment_type_histogram": histogram,
        "length": {
            "min": min(lengths) if lengths else None,
            "max": max(lengths) if lengths else None,
            "mean": sum(lengths) / len(lengths) if lengths else None,
        },
    }
    out = Path(args.out or (args.corpus + ".validation.json"))
    _write_json(out, report)
    _write_manifest(out, {
        "subcommand": "validate",
        "inputs": {"corpus": args.corpus},
        "outputs": [str(out)],
    })
    _eprint(f"validated {len(records)} records, {report['total_fragments']} fragments")
    return 0


def _load_config_file(path: str | None) -> tuple[dict, dict]:
    if path is None:
        return {}, {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    unknown = set(obj) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return obj.get("model", {}), obj.get("train", {})


def cmd_train(args: argparse.Namespace) -> int:
    model_kw, train_kw = _load_config_file(args.config)
    for key, value in (("alpha", args.alpha), ("beta", args.beta), ("tau", args.tau)):
        if value is not None:
            model_kw[key] = value
    for key, value in (
        ("total_steps", args.steps),
        ("seed", args.seed),
        ("max_lr", args.max_lr),
        ("batch_size", args.batch_size),
        ("microbatch_size", args.microbatch_size),
        ("checkpoint_every", args.checkpoint_every),
    ):
        if value is not None:
            train_kw[key] = value
    model_config = ModelConfig(**model_kw)
    train_config = TrainConfig(**train_kw)

    records = load_corpus(args.corpus)
    out_dir = Path(args.out)
    model, history = train(model_config, train_config, records, out_dir, resume_from=args.resume)
    _write_manifest(out_dir, {
        "subcommand": "train",
        "inputs": {"corpus": args.corpus, "config": args.config, "resume": args.resume},
        "outputs": [str(out_dir / "model.ckpt"), str(out_dir / "train_log.jsonl")],
        "config": {"model": asdict(model_config), "train": asdict(train_config)},
        "seed": train_config.seed,
        "fingerprints": {"checkpoint": fingerprint(model)},
    })
    if history:
        last = history[-1]
        _eprint(
            f"trained {last['step'] + 1} steps, final loss {last['loss']:.4f} "
            f"(ntp {last['loss_ntp']:.4f})"
        )
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    records = load_corpus(args.docs)
    embedder = ModelTextEmbedder(model)
    index = build_index(docs_from_corpus(records), embedder)
    out = Path(args.out)
    save_index(index, out)
    _write_manifest(out, {
        "subcommand": "index",
        "inputs": {"checkpoint": args.checkpoint, "docs": args.docs},
        "outputs": [str(out)],
        "fingerprints": {"checkpoint": embedder.fingerprint},
    })
    _eprint(f"indexed {len(index)} documents")
    return 0


def _parse_topk_list(raw: str) -> list[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ValueError(f"bad --topk-retrieval value {raw!r}") from exc
    if not values or any(v < 1 for v in values):
        raise ValueError("--topk-retrieval entries must be positive integers")
    return values


def _sweep_path(out: Path, k: int, multi: bool) -> Path:
    if not multi:
        return out
    return out.with_name(f"{out.stem}_K{k}{out.suffix}")


def cmd_generate(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    checkpoint_fp = fingerprint(model)
    base = dict(
        top_k=args.top_k,
        temperature=args.temperature,
        max_residues=args.max_residues,
    )
    out = Path(args.out)

    if args.unconditional:
        if args.index is not None or args.topk_retrieval is not None:
            _eprint("warning: --unconditional ignores retrieval flags (--index, --topk-retrieval)")
        if args.corpus is None:
            raise ValueError("--unconditional needs --corpus for the fragment pool")
        records = load_corpus(args.corpus)
        designs = []
        for i in range(args.count):
            params = GenerationParams(seed=args.seed + i, **base)
            sequence, trace = generate_unconditional(model, records, params)
            designs.append(design_record(
                f"design-{i:04d}", "", sequence, trace, params, checkpoint_fp
            ))
        write_designs(designs, out)
        _write_manifest(out, {
            "subcommand": "generate",
            "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus},
            "outputs": [str(out)],
            "config": {"unconditional": True, "count": args.count, **base},
            "seed": args.seed,
            "fingerprints": {"checkpoint": checkpoint_fp},
        })
        _eprint(f"wrote {len(designs)} unconditional designs")
        return 0

    if args.index is None:
        raise ValueError("conditional generation needs --index (or pass --unconditional)")
    if args.description is not None:
        descriptions = [args.description]
    elif args.descriptions_file is not None:
        with open(args.descriptions_file, encoding="utf-8") as fh:
            descriptions = [line.strip() for line in fh if line.strip()]
    else:
        raise ValueError("pass --description or --descriptions-file")
    if not descriptions:
        raise ValueError("no descriptions to generate from")

    index = load_index(args.index)
    embedder = ModelTextEmbedder(model)
    topk_values = _parse_topk_list(args.topk_retrieval or "16")
    multi = len(topk_values) > 1
    outputs = []
    for k in topk_values:
        designs = []
        counter = 0
        for d_idx, description in enumerate(descriptions):
            for s_idx in range(args.count):
                params = GenerationParams(seed=args.seed + counter, retrieval_k=k, **base)
                sequence, trace = generate(model, description, index, params, embedder)
                designs.append(design_record(
                    f"design-{d_idx:04d}-{s_idx:04d}", description, sequence, trace,
                    params, checkpoint_fp,
                ))
                counter += 1
        path = _sweep_path(out, k, multi)
        write_designs(designs, path)
        outputs.append(str(path))
        _write_manifest(path, {
            "subcommand": "generate",
            "inputs": {"checkpoint": args.checkpoint, "index": args.index},
            "outputs": [str(path)],
            "config": {"unconditional": False, "retrieval_k": k, "count": args.count, **base},
            "seed": args.seed,
            "fingerprints": {"checkpoint": checkpoint_fp, "index": index.embedder_fingerprint},
        })
    _eprint(f"wrote designs for K={topk_values} to {outputs}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    designs = load_designs(args.designs)
    scorer = None
    if args.scorer is not None:
        scorer, _ = load_checkpoint(args.scorer)
    report = evaluate_designs(
        designs,
        scorer,
        rep_n=args.rep_n,
        retrieval_t=args.retrieval_t,
        seed=args.seed,
    )
    out = Path(args.out)
    _write_json(out, report)
    outputs = [str(out)]
    if args.table:
        table_path = Path(args.table)
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table_path.write_text(render_table(report), encoding="utf-8")
        outputs.append(str(table_path))
    _write_manifest(out, {
        "subcommand": "evaluate",
        "inputs": {"designs": args.designs, "scorer": args.scorer},
        "outputs": outputs,
        "config": {"rep_n": args.rep_n, "retrieval_t": args.retrieval_t},
        "seed": args.seed,
        "fingerprints": {"scorer": report["metadata"]["scorer_fingerprint"]},
    })
    for notice in report["notices"]:
        _eprint(f"notice: {notice}")
    _eprint(f"evaluated {len(designs)} designs")
    return 0


def _baseline_lengths(args: argparse.Namespace, rng: np.random.Generator) -> list[int]:
    if args.length_from is not None:
        reference = []
        with open(args.length_from, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    reference.append(len(json.loads(line)["sequence"]))
        if not reference:
            raise ValueError(f"no sequences found in {args.length_from}")
        return [int(reference[i]) for i in rng.integers(0, len(reference), size=args.count)]
    low, high = args.length_min, args.length_max
    if not 1 <= low <= high:
        raise ValueError("need 1 <= --length-min <= --length-max")
    return [int(v) for v in rng.integers(low, high + 1, size=args.count)]


def cmd_baseline(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    dist = None
    pool: list[str] = []
    if args.kind in ("empirical", "plus"):
        if args.corpus is None:
            raise ValueError(f"baseline kind {args.kind!r} needs --corpus")
        records = load_corpus(args.corpus)
        dist = empirical_aa_distribution(records)
        pool = [r.fragment_text(f) for r in records for f in r.fragments]
    lengths = _baseline_lengths(args, rng)
    designs = []
    for i, length in enumerate(lengths):
        if args.kind == "uniform":
            sequence = random_uniform(length, rng)
        elif args.kind == "empirical":
            sequence = random_empirical(dist, length, rng)
        else:
            sequence = random_plus(dist, pool, length, rng, p_frag=args.p_frag)
        designs.append({
            "id": f"{args.kind}-{i:04d}",
            "description": f"random baseline ({args.kind})",
            "sequence": sequence,
            "trace": [],
            "params": {"kind": args.kind, "p_frag": args.p_frag if args.kind == "plus" else None},
            "checkpoint": None,
        })
    out = Path(args.out)
    write_designs(designs, out)
    _write_manifest(out, {
        "subcommand": "baseline",
        "inputs": {"corpus": args.corpus, "length_from": args.length_from},
        "outputs": [str(out)],
        "config": {"kind": args.kind, "count": args.count, "p_frag": args.p_frag},
        "seed": args.seed,
    })
    _eprint(f"wrote {len(designs)} {args.kind} baseline sequences")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fragdesign",
        description="Design protein sequences over a dynamic fragment vocabulary.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a corpus file and report statistics")
    p.add_argument("corpus")
    p.add_argument("--out", default=None, help="report path (default: CORPUS.validation.json)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help='JSON file with "model"/"train" sections')
    p.add_argument("--resume", default=None, help="training state file to resume from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--max-lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--microbatch-size", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build a description embedding index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs", required=True, help="supporting documents (corpus JSONL)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("generate", help="design sequences from descriptions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--description", default=None)
    p.add_argument("--descriptions-file", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1, help="designs per description")
    p.add_argument("--topk-retrieval", default=None,
                   help="retrieval breadth K, or a comma list for a sweep (default 16)")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-residues", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--corpus", default=None, help="fragment pool for --unconditional")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a designs file")
    p.add_argument("--designs", required=True)
    p.add_argument("--scorer", default=None, help="scorer checkpoint (PPL omitted when missing)")
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None, help="also write a fixed-width text table")
    p.add_argument("--rep-n", type=int, default=3)
    p.add_argument("--retrieval-t", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="emit random baseline sequences")
    p.add_argument("--kind", required=True, choices=("uniform", "empirical", "plus"))
    p.add_argument("--corpus", default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length-from", default=None,
                   help="JSONL file whose sequence lengths are mirrored")
    p.add_argument("--length-min", type=int, default=100)
    p.add_argument("--length-max", type=int, default=500)
    p.add_argument("--p-frag", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorpusError, CheckpointError, RetrievalError, TrainingError,
            ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _eprint(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
