"""Command-line entry point: ``tokenforge <verb> ...``.

Every verb writes into ``--out`` (created if needed), echoes its resolved
configuration to ``resolved_config.json`` and stamps ``versions.json``.
Failures exit with status 1 and a one-line diagnostic on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pipeline as P
from .classifier import dumps_classifier, loads_classifier
from .diffusion import dumps_denoiser, loads_denoiser, sample
from .forge import ForgeResult, forge, replay_stop
from .metrics import ablation_csv, augment_csv
from .scenarios import load_dataset, resolve_scenario, save_dataset, save_scenario, scenario_to_dict
from .svg import scatter_svg


class CliError(Exception):
    pass


def _read(path, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing {what}: {p}")
    return p.read_text(encoding="utf-8")


def _config(args) -> P.RunConfig:
    cfg = P.RunConfig.load(args.config) if getattr(args, "config", None) else P.RunConfig()
    over = {}
    for key in ("scenario", "seed", "n_per_class"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return cfg.with_overrides(**over) if over else cfg


def _prepare_out(args, cfg: P.RunConfig, extra: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": args.verb, "config": cfg.to_dict(), **extra}
    (out / "resolved_config.json").write_text(P.dumps_json(echo), encoding="utf-8")
    (out / "versions.json").write_text(P.dumps_json(P.versions()), encoding="utf-8")
    return out


def _curve_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(losses, start=1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def _points_csv(x: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(x.shape[1])])
    for row in x:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _snapshots_csv(result: ForgeResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = result.embedding.shape[0]
    w.writerow(["step"] + [f"v{j}" for j in range(dim)])
    for k, v in enumerate(result.embedding_trajectory):
        w.writerow([k] + [repr(float(a)) for a in v])
    return buf.getvalue()


def _target(spec, label: str) -> int:
    try:
        return spec.class_index(label)
    except (KeyError, ValueError):
        raise CliError(f"unknown target class {label!r}; choose from {spec.labels()}") from None


# --- verbs -------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    spec, ds = P.make_data(cfg)
    train, test = P.split(cfg, ds)
    out = _prepare_out(args, cfg, {"scenario_spec": scenario_to_dict(spec)})
    save_dataset(ds, out / "dataset.csv")
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    save_scenario(spec, out / "scenario.json")


def cmd_train_denoiser(args) -> None:
    cfg = _config(args)
    _read(args.data, "dataset")
    train = load_dataset(args.data)
    vocab = resolve_scenario(cfg.scenario).vocab
    model, losses = P.fit_denoiser(cfg, vocab, train)
    out = _prepare_out(args, cfg, {"data": str(args.data)})
    (out / "denoiser.json").write_text(dumps_denoiser(model), encoding="utf-8")
    (out / "loss_curve.csv").write_text(_curve_csv(losses), encoding="utf-8")


def cmd_train_classifier(args) -> None:
    cfg = _config(args)
    _read(args.data, "dataset")
    train = load_dataset(args.data)
    spec = resolve_scenario(cfg.scenario)
    model, losses = P.fit_expert(cfg, train, spec.num_classes)
    out = _prepare_out(args, cfg, {"data": str(args.data)})
    (out / "classifier.json").write_text(dumps_classifier(model), encoding="utf-8")
    (out / "loss_curve.csv").write_text(_curve_csv(losses), encoding="utf-8")


def cmd_forge(args) -> None:
    cfg = _config(args)
    model = loads_denoiser(_read(args.denoiser, "denoiser checkpoint"))
    clf = loads_classifier(_read(args.classifier, "classifier checkpoint"))
    spec = resolve_scenario(cfg.scenario)
    target = _target(spec, args.target)
    fcfg = cfg.forge_config(spec, target)
    result = forge(model, clf, fcfg)
    # the log alone must reproduce the recorded stop
    if replay_stop(result.log, fcfg) != (result.stop_rule, result.steps_taken):
        raise CliError("stop rule is not reproducible from the step log")
    out = _prepare_out(args, cfg, {"target": args.target, "forge": fcfg.to_dict()})
    (out / "forge.json").write_text(result.dumps(), encoding="utf-8")
    (out / "steps.csv").write_text(result.log_csv(), encoding="utf-8")
    (out / "snapshots.csv").write_text(_snapshots_csv(result), encoding="utf-8")


def cmd_sample(args) -> None:
    cfg = _config(args)
    model = loads_denoiser(_read(args.denoiser, "denoiser checkpoint"))
    prompt = tuple(args.prompt.split())
    if args.token:
        result = ForgeResult.loads(_read(args.token, "forge result"))
        try:
            model = result.apply(model, step=args.step)
        except IndexError as exc:
            raise CliError(str(exc)) from None
    unknown = [t for t in prompt if t not in model.table]
    if unknown or not prompt:
        raise CliError(f"unknown prompt tokens {unknown}" if unknown else "empty prompt")
    w = cfg.guidance_w if args.w is None else args.w
    x = sample(model, prompt, w=w, n=args.n, seed=cfg.seed)
    extra = {"prompt": list(prompt), "token": args.token, "step": args.step, "n": args.n, "w": w}
    out = _prepare_out(args, cfg, extra)
    (out / "samples.csv").write_text(_points_csv(x), encoding="utf-8")
    if args.svg:
        real = load_dataset(args.real) if args.real else None
        names = resolve_scenario(cfg.scenario).labels() if real is not None else None
        (out / "samples.svg").write_text(scatter_svg(x, real, names, title=" ".join(prompt)), encoding="utf-8")


def _load_tokens(paths: List[str], spec):
    forged = {}
    for p in paths:
        r = ForgeResult.loads(_read(p, "forge result"))
        forged[r.target_class] = r
    missing = [spec.classes[c].label for c in range(spec.num_classes) if c not in forged]
    if missing:
        raise CliError(f"missing forge results for classes {missing}")
    return forged


def cmd_eval(args) -> None:
    cfg = _config(args)
    spec = resolve_scenario(cfg.scenario)
    model = loads_denoiser(_read(args.denoiser, "denoiser checkpoint"))
    clf = loads_classifier(_read(args.classifier, "classifier checkpoint"))
    _read(args.train, "training dataset")
    _read(args.test, "test dataset")
    train, test = load_dataset(args.train), load_dataset(args.test)
    forged = _load_tokens(args.tokens, spec)
    res = P.evaluate(cfg, spec, model, clf, forged, train, test)
    out = _prepare_out(args, cfg, {"tokens": list(args.tokens)})
    (out / "accuracy.csv").write_text(res.report.accuracy_csv(), encoding="utf-8")
    (out / "distances.csv").write_text(res.report.distances_csv(), encoding="utf-8")
    if res.augment:
        (out / "augment.csv").write_text(augment_csv(res.augment), encoding="utf-8")
    (out / "summary.json").write_text(P.dumps_json(res.summary), encoding="utf-8")


def cmd_ablate_bsz(args) -> None:
    cfg = _config(args)
    spec = resolve_scenario(cfg.scenario)
    model = loads_denoiser(_read(args.denoiser, "denoiser checkpoint"))
    clf = loads_classifier(_read(args.classifier, "classifier checkpoint"))
    rows = P.ablate(cfg, spec, model, clf, _target(spec, args.target))
    out = _prepare_out(args, cfg, {"target": args.target})
    (out / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokenforge", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = verb("gen-data", cmd_gen_data, "sample a scenario dataset")
    p.add_argument("--scenario", help="built-in name or scenario JSON")
    p.add_argument("--n", dest="n_per_class", type=int, help="points per class")

    for name, fn in (("train-denoiser", cmd_train_denoiser), ("train-classifier", cmd_train_classifier)):
        p = verb(name, fn, f"{name.split('-')[1]} training")
        p.add_argument("--data", required=True, help="dataset CSV")

    def models(p):
        p.add_argument("--denoiser", required=True)
        p.add_argument("--classifier", required=True)

    p = verb("forge", cmd_forge, "optimize a class token")
    models(p)
    p.add_argument("--target", required=True, help="class label")

    p = verb("sample", cmd_sample, "generate points")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--prompt", required=True, help="space separated tokens")
    p.add_argument("--token", help="forge result JSON providing the token")
    p.add_argument("--step", type=int, help="token snapshot step (default: last)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--w", type=float, help="guidance weight (default: config)")
    p.add_argument("--svg", action="store_true", help="also write samples.svg")
    p.add_argument("--real", help="dataset CSV drawn as contours in the SVG")

    p = verb("eval", cmd_eval, "accuracy, distances and augmentation study")
    models(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--tokens", nargs="+", required=True, help="forge result JSON per class")

    p = verb("ablate-bsz", cmd_ablate_bsz, "forge at every batch size in the config")
    models(p)
    p.add_argument("--target", required=True)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"tokenforge {args.verb}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
