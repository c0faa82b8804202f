"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand writes its artifacts plus ``run-summary.json`` into ``--out``
and never modifies its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import ContractError, NumericError
from .checkpoint import IntegrityError, MigrationError
from .config import ConfigError, RunConfig, apply_overrides, load, loads, to_dict
from .corpus import config_from_manifest, generate_corpus, load_corpus
from .evaluation import (
    export_embeddings,
    alignment_margin,
    evaluate_probe,
    finetune_probe,
    noisy_reports,
    write_embedding_rows,
    LinearProbe,
    ProbeResult,
)
from .gradcheck import full_model_gradcheck
from .phoneme2unit import P2UConfig, Phoneme2UnitModel, config_dict, phoneme2unit_train
from .pipeline import fit_corpus_tokenizer, p2u_config, p2u_pairs, tokenize_all
from .records import RecordFormatError, read_records, write_records
from .tokenizer import TokenizerFormatError, TokenizerModel
from .training import TrainingDiverged, load_model, pretrain

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4, 5
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def blob_hash(path: Path) -> str:
    """Content hash in git's blob form: sha1 of ``blob <size>\\0`` plus the bytes."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = blob_hash(f)
    return out


def write_summary(out: Path, command: str, cfg: RunConfig, inputs, metrics: dict, outputs) -> None:
    summary = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "config": to_dict(cfg),
        "inputs": hash_inputs(inputs),
        "outputs": sorted(str(o) for o in outputs),
        "metrics": metrics,
    }
    (out / "run-summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")


def require(args, *names) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name.replace('_', '-')}")


def read_corpus(path) -> tuple[dict, dict]:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} is not a corpus directory (no manifest.json)")
    return load_corpus(path)


def with_corpus(cfg: RunConfig, manifest: dict) -> RunConfig:
    """Later stages take the corpus settings from the data they read, not the config file."""
    return replace(cfg, corpus=config_from_manifest(manifest))


def save_p2u(model: Phoneme2UnitModel, path) -> None:
    ckpt_io.save(ckpt_io.Checkpoint({"kind": "p2u", "config": config_dict(model.cfg)}, dict(model.state_dict())), path)


def load_p2u(path) -> Phoneme2UnitModel:
    ck = ckpt_io.load(path)
    model = Phoneme2UnitModel(P2UConfig(**ck.header["config"]))
    model.load_state_dict(ck.blocks)
    return model


def save_probe(result: ProbeResult, task: str, classes: int, path) -> None:
    header = {"kind": "probe", "task": task.upper(), "classes": classes}
    blocks = {
        "weight": result.probe.weight.data,
        "bias": result.probe.bias.data,
        "mean": result.stats[0],
        "std": result.stats[1],
    }
    ckpt_io.save(ckpt_io.Checkpoint(header, blocks), path)


def load_probe(path) -> tuple[LinearProbe, tuple, dict]:
    ck = ckpt_io.load(path)
    if ck.header.get("kind") != "probe":
        raise UsageError(f"{path} is not a probe checkpoint")
    w = ck.blocks["weight"]
    probe = LinearProbe(w.shape[0], w.shape[1])
    probe.weight.data[...] = w
    probe.bias.data[...] = ck.blocks["bias"]
    return probe, (ck.blocks["mean"], ck.blocks["std"]), ck.header


def report_dict(rep) -> dict:
    return {"task": rep.task, "frame_accuracy": rep.frame_accuracy, "wer": rep.wer, "frames": rep.frames, "utterances": rep.utterances}


# ------------------------------------------------------------ subcommands


def cmd_gen(args, cfg: RunConfig, out: Path):
    if args.seed is not None:
        cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed))
    manifest = generate_corpus(cfg.corpus, out)
    return cfg, [], {"counts": manifest["counts"], "config_hash": manifest["config_hash"]}


def cmd_tokenize(args, cfg: RunConfig, out: Path):
    require(args, "corpus")
    manifest, splits = read_corpus(args.corpus)
    cfg = with_corpus(cfg, manifest)
    model, fit = fit_corpus_tokenizer(cfg, splits["train"])
    p2u = load_p2u(args.p2u) if args.p2u else None
    train = tokenize_all(splits["train"], model, p2u)
    model.save(out / "tokenizer.utok")
    write_records(out / "train.rec", train)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    av = [r for r in splits["train"] if r.kind == "AV"]
    agree = [np.mean(model.units(r.visual, r.audio) == model.units(None, r.audio)) for r in av]
    metrics = {
        "k": model.k,
        "distortion": fit.distortion,
        "kmeans_iterations": len(fit.history),
        "audio_only_agreement": float(np.mean(agree)) if agree else None,
    }
    return cfg, [args.corpus] + ([args.p2u] if args.p2u else []), metrics


def read_stage(path) -> tuple[dict, list]:
    path = Path(path)
    if not (path / "train.rec").exists() or not (path / "manifest.json").exists():
        raise UsageError(f"{path} lacks train.rec/manifest.json from an earlier stage")
    return json.loads((path / "manifest.json").read_text()), read_records(path / "train.rec")


def cmd_p2u_train(args, cfg: RunConfig, out: Path):
    require(args, "data")
    manifest, train = read_stage(args.data)
    cfg = with_corpus(cfg, manifest)
    tok = TokenizerModel.load(Path(args.data) / "tokenizer.utok")
    cfg = replace(cfg, tokenizer=replace(cfg.tokenizer, k=tok.k))
    if args.seed is not None:
        cfg = replace(cfg, p2u=replace(cfg.p2u, seed=args.seed))
    pairs = p2u_pairs(train)
    if not pairs:
        raise ContractError("no tokenized AP records to learn the phoneme-to-unit mapping from")
    model = phoneme2unit_train(pairs, p2u_config(cfg))
    save_p2u(model, out / "p2u.ckpt")
    write_records(out / "train.rec", tokenize_all(train, tok, model))
    tok.save(out / "tokenizer.utok")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    hits = []
    for ph, un, _ in pairs[:50]:
        pred = model.infer(ph)[0]
        n = min(len(pred), len(un))
        hits.append(np.mean(pred[:n] == un[:n]))
    metrics = {"pairs": len(pairs), "final_loss": model.loss_history[-1], "train_unit_accuracy": float(np.mean(hits))}
    return cfg, [args.data], metrics


def cmd_pretrain(args, cfg: RunConfig, out: Path):
    require(args, "data")
    manifest, train = read_stage(args.data)
    cfg = with_corpus(cfg, manifest)
    missing = [r.uid for r in train if r.target is None]
    if missing:
        raise ContractError(f"records {missing[:5]} have no targets; run tokenize and p2u-train first")
    kinds = {k: [r for r in train if r.kind == k] for k in ("AV", "A", "AP", "P")}
    k = TokenizerModel.load(Path(args.data) / "tokenizer.utok").k
    if k != cfg.tokenizer.k:
        cfg = replace(cfg, tokenizer=replace(cfg.tokenizer, k=k))
    trainer, rows = pretrain(cfg, kinds, cfg.corpus.phonemes, k, out_dir=out)
    last = rows[-1] if rows else {"losses": {}, "total": None}
    metrics = {"steps": trainer.step, "final_losses": last["losses"], "final_total": last["total"]}
    return cfg, [args.data], metrics


def probe_splits(args):
    manifest, splits = read_corpus(args.corpus)
    return manifest, splits["labeled"], splits["test"]


def model_config(ck) -> RunConfig:
    return loads(json.dumps(ck.header["config"]))


def cmd_finetune(args, cfg: RunConfig, out: Path):
    require(args, "ckpt", "corpus", "task")
    ck = ckpt_io.load(args.ckpt)
    cfg = replace(model_config(ck), probe=cfg.probe)
    model = load_model(ck)
    _, labeled, test = probe_splits(args)
    classes = int(ck.header["units"])
    result = finetune_probe(model, labeled, test, args.task, classes, cfg.probe)
    save_probe(result, args.task, classes, out / "probe.ckpt")
    if cfg.probe.tune_encoder:
        tuned = ckpt_io.Checkpoint(dict(ck.header, kind="tuned"), {f"param/{n}": p.data for n, p in model.named_parameters()})
        ckpt_io.save(tuned, out / "tuned.ckpt")
    return cfg, [args.ckpt, args.corpus], report_dict(result.report)


def cmd_eval(args, cfg: RunConfig, out: Path):
    require(args, "ckpt", "corpus", "task")
    ck = ckpt_io.load(args.ckpt)
    cfg = replace(model_config(ck), probe=cfg.probe)
    model = load_model(ck)
    _, labeled, test = probe_splits(args)
    classes = int(ck.header["units"])
    inputs = [args.ckpt, args.corpus]
    if args.probe:
        probe, stats, header = load_probe(args.probe)
        result = ProbeResult(probe, stats, evaluate_probe(model, probe, stats, test, args.task), model)
        result.report.extra["probe_task"] = header["task"]
        inputs.append(args.probe)
    else:
        result = finetune_probe(model, labeled, test, args.task, classes, cfg.probe)
    noisy = noisy_reports(model, result, test, args.task, cfg.probe.noise_types, cfg.probe.snr_grid, cfg.probe.seed)
    rows = ["noise,snr_db,frame_accuracy,wer", f"clean,inf,{result.report.frame_accuracy!r},{result.report.wer!r}"]
    rows += [f"{kind},{snr!r},{rep.frame_accuracy!r},{rep.wer!r}" for (kind, snr), rep in noisy.items()]
    (out / "eval.csv").write_text("\n".join(rows) + "\n")
    metrics = {"probe_task": result.report.extra.get("probe_task", args.task), "clean": report_dict(result.report), "noisy": {f"{k}@{s:g}dB": report_dict(r) for (k, s), r in noisy.items()}}
    return cfg, inputs, metrics


def cmd_export_emb(args, cfg: RunConfig, out: Path):
    require(args, "ckpt", "corpus")
    ck = ckpt_io.load(args.ckpt)
    cfg = model_config(ck)
    model = load_model(ck)
    _, _, test = probe_splits(args)
    items = [(r, view) for r in test for view in ("av", "a", "v")]
    write_embedding_rows(export_embeddings(model, items), out / "embeddings.csv")
    return cfg, [args.ckpt, args.corpus], {"rows": len(items), "alignment": alignment_margin(model, test)}


def cmd_gradcheck(args, cfg: RunConfig, out: Path):
    rep = full_model_gradcheck(cfg.model, cfg.tokenizer.k, frames=args.frames, seed=cfg.seed)
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.parameters} parameters ({rep.seconds:.1f} s)")
    metrics = {"max_rel_error": rep.max_rel_error, "parameters": rep.parameters, "seconds": rep.seconds, "passed": rep.max_rel_error < GRADCHECK_TOLERANCE}
    return cfg, [], metrics


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic corpus"),
    "tokenize": (cmd_tokenize, "fit the unit tokenizer and attach targets"),
    "p2u-train": (cmd_p2u_train, "train the phoneme-to-unit model and tokenize text-only records"),
    "pretrain": (cmd_pretrain, "masked unit pretraining"),
    "finetune": (cmd_finetune, "fit a frame-level probe for one task"),
    "eval": (cmd_eval, "clean and noisy evaluation of a probe"),
    "export-emb": (cmd_export_emb, "export 2-D embeddings and the alignment margin"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimodal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        p.add_argument("--out", default=".", help="output directory")
        if name in ("tokenize", "finetune", "eval", "export-emb"):
            p.add_argument("--corpus", help="directory written by gen")
        if name in ("p2u-train", "pretrain"):
            p.add_argument("--data", help="directory written by the previous stage")
        if name == "tokenize":
            p.add_argument("--p2u", help="phoneme-to-unit checkpoint for text-only records")
        if name in ("finetune", "eval", "export-emb"):
            p.add_argument("--ckpt", help="pretraining checkpoint")
        if name in ("finetune", "eval"):
            p.add_argument("--task", type=str.upper, choices=["ASR", "AVSR", "VSR"])
        if name == "eval":
            p.add_argument("--probe", help="probe checkpoint from finetune (fit afresh if omitted)")
        if name == "gradcheck":
            p.add_argument("--frames", type=int, default=6)
    return parser


def load_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None and args.command not in ("gen", "p2u-train"):
        cfg = replace(cfg, seed=args.seed)
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = COMMANDS[args.command][0]
        cfg, inputs, metrics = handler(args, cfg, out)
        outputs = [p for p in out.iterdir() if p.name != "run-summary.json"]
        write_summary(out, args.command, cfg, inputs, metrics, outputs)
        if args.command == "gradcheck" and not metrics["passed"]:
            return EXIT_NUMERIC
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, MigrationError, RecordFormatError, TokenizerFormatError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (UsageError, ContractError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
