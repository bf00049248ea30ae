"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 numerical abort, 3 config/hash mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config, parse_override
from .dataio import Record, dumps, load_dataset, save_dataset
from .egnn import CONDITIONING_MODES
from .errors import ConfigError, NumericalError, ValidationError
from .metrics import evaluate, stylization_delta
from .synth import category_name
from .text import make_embedder

log = logging.getLogger("sgdiff")


def _config(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in (getattr(args, "set", None) or []))
    return load_config(getattr(args, "config", None), overrides)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    codebook = None
    if args.codec:
        _, index, _ = pipeline.load_codec(args.codec)
        codebook = index.codebook()
    records = pipeline.generate_records(args.grammar or cfg.data.grammar, args.count, args.seed,
                                        cfg.data.k_triplets, cfg.data.code_dim, codebook, pipeline.rules_of(cfg))
    try:
        save_dataset(args.out, records)
    except OSError as e:
        raise ValidationError(f"cannot write {args.out}: {e}") from None
    print(json.dumps(pipeline.dataset_summary(records), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    records = load_dataset(args.data)
    result = pipeline.train_denoiser(cfg, records, args.out, resume=not args.no_resume, dry_run=args.dry_run)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_train_codec(args) -> int:
    cfg = _config(args)
    result = pipeline.train_codec(cfg, args.out)
    print(json.dumps({"metrics": result["metrics"], "checkpoint": args.out}, sort_keys=True))
    return 0


def _load_bundle(args):
    expect = _config(args) if getattr(args, "config", None) else None
    return pipeline.load_denoiser(args.checkpoint, expect_config=expect)


def cmd_sample(args) -> int:
    bundle = _load_bundle(args)
    count = args.count
    if args.prompts_from:
        recs = load_dataset(args.prompts_from)[:count] if count else load_dataset(args.prompts_from)
        prompts = [r.prompt for r in recs]
        counts = [len(r.scene) for r in recs]
        triplets = [r.triplets for r in recs]
    else:
        count = count or 1
        prompts = [args.prompt or ""] * count
        counts = [args.n_objects] * count if args.n_objects else pipeline.draw_object_counts(bundle, count, args.seed)
        triplets = [()] * count
    if args.unconditional:
        prompts = [""] * len(prompts)
    scenes = pipeline.generate_scenes(bundle, prompts, counts, args.seed, unconditional=args.unconditional)
    retrieved = None
    if args.codec:
        _, index, _ = pipeline.load_codec(args.codec)
        retrieved = [pipeline.retrieve_objects(index, s) for s in scenes]
    records = [Record(s, p, tuple(t)) for s, p, t in zip(scenes, prompts, triplets)]
    save_dataset(args.out, records)
    _write_json(str(args.out) + ".manifest.json", {
        "command": "sample", "seed": args.seed, "checkpoint_hash": bundle.blob_hash,
        "config_hash": bundle.meta["config_hash"], "schedule": {"T": bundle.cfg.diffusion.steps,
                                                                "kind": bundle.cfg.diffusion.schedule},
        "prompts": prompts, "n_objects": counts, "unconditional": args.unconditional, "retrieved": retrieved,
    })
    return 0


def cmd_edit(args) -> int:
    bundle = _load_bundle(args)
    rec = load_dataset(args.scene)[args.index]
    prompt = args.prompt if args.prompt is not None else rec.prompt
    scene = pipeline.edit_scene(bundle, rec.scene, args.task, prompt, args.seed, n_new=args.n_new)
    Path(args.out).write_text(dumps(Record(scene, prompt, rec.triplets)) + "\n", encoding="utf-8")
    _write_json(str(args.out) + ".manifest.json", {
        "command": "edit", "task": args.task, "seed": args.seed, "checkpoint_hash": bundle.blob_hash,
        "config_hash": bundle.meta["config_hash"], "prompt": prompt, "source": str(args.scene),
        "index": args.index, "n_new": args.n_new,
    })
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = load_dataset(args.scenes)
    if any(not r.triplets for r in records) and not args.allow_missing:
        raise ValidationError("every scene needs ground-truth triplets for recall metrics")
    deltas = None
    if args.object_embeddings:
        deltas = _deltas(records, args.object_embeddings, args.style_prompt, cfg)
    report = evaluate([r.scene for r in records], [r.triplets for r in records], args.seed, args.trials,
                      pipeline.rules_of(cfg), deltas)
    Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps(report.means, sort_keys=True))
    return 0


def _deltas(records, path, style_prompt, cfg):
    if style_prompt is None:
        raise ValidationError("--object-embeddings needs --style-prompt")
    embed = make_embedder(cfg.data.text_provider, cfg.data.text_dim, cfg.data.text_sidecar)
    rows = [json.loads(line)["emb"] for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(rows) != len(records):
        raise ValidationError(f"{path}: {len(rows)} embedding rows for {len(records)} scenes")
    style = embed(style_prompt)
    out = []
    for rec, objs in zip(records, rows):
        classes = [embed(category_name(rec.scene.room_type, c)) for c in rec.scene.categories]
        out.append(stylization_delta(objs, style, classes))
    return out


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in CONDITIONING_MODES]
    if bad:
        raise ValidationError(f"unknown conditioning modes {bad}; choose from {list(CONDITIONING_MODES)}")
    cfg = _config(args)
    report = run_ablation(cfg, load_dataset(args.data), load_dataset(args.eval_data), modes, args.out,
                          sample_seed=args.seed, trials=args.trials)
    print(report["table"])
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suites

    return run_suites(checkpoint=args.checkpoint, quick=args.quick)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdiff", description="Text-conditioned scene-graph diffusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate a synthetic scene dataset"))
    sp.add_argument("--grammar", default=None)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--codec", help="codec checkpoint whose catalog codes are assigned to objects")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train", help="train the denoiser"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dry-run", action="store_true", help="run a single step and exit")
    sp.add_argument("--no-resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("train-codec", help="train the shape VAE and build the retrieval index"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_codec)

    sp = with_config(sub.add_parser("sample", help="sample scenes from a trained denoiser"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", default="")
    sp.add_argument("--prompts-from", help="dataset whose prompts and object counts are used")
    sp.add_argument("--n-objects", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--unconditional", action="store_true")
    sp.add_argument("--codec", help="codec checkpoint for object retrieval")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = with_config(sub.add_parser("edit", help="zero-shot scene editing"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", choices=["stylize", "rearrange", "complete"], required=True)
    sp.add_argument("--scene", required=True, help="dataset file holding the input scene")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--prompt", default=None)
    sp.add_argument("--n-new", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_edit)

    sp = with_config(sub.add_parser("eval", help="controllability metrics"))
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--allow-missing", action="store_true", help="score scenes without triplets as 1.0")
    sp.add_argument("--object-embeddings", help="JSON-Lines {'emb': [[...] per object]} per scene")
    sp.add_argument("--style-prompt")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="compare conditioning modes under one budget"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--modes", default=",".join(CONDITIONING_MODES))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("verify", help="run the property battery")
    sp.add_argument("--checkpoint", help="also integrity-check this checkpoint")
    sp.add_argument("--quick", action="store_true")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except (ValidationError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
