"""Command-line entry point: ``synth``, ``train``, ``score`` and ``evaluate``.

Every command writes the effective configuration (defaults, config file and
flags merged) as ``config.ini`` next to its outputs.  Exit codes: 0 success,
1 usage, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .autoencoder import build_model, load_model, save_model, train, write_history
from .config import RunConfig, dump_config, load_config
from .evaluation import EvalSettings, effective_denoise, evaluate, format_table, write_report_csv
from .numerics import CheckpointError, ShapeError, read_checkpoint, write_checkpoint
from .synthetic import build_dataset
from .trigger import (METHODS, MethodConfig, ProjectionSet, score_method, train_projections,
                      write_profiles, write_scores)
from .waveforms import (WaveformError, load_dataset, onset_margin_filter, preprocess,
                        stack_samples)

log = logging.getLogger("latentcov")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
RUN_FILE = "run.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    # Defaults are suppressed so the flags work before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="BLAS/FFT threads (1 = bit-reproducible)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="latentcov", parents=[common],
                     description="Latent cross-covariance event detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n-event", type=int)
    s.add_argument("--n-noise", type=int)
    s.add_argument("--snr", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--noise-spectrum", choices=("brownish", "white"))
    s.add_argument("--glitch-fraction", type=float)
    s.add_argument("--name")

    t = sub.add_parser("train", parents=[common], help="train an autoencoder (or an ensemble)")
    t.add_argument("manifest")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--k", type=int)
    t.add_argument("--denoise", type=float, help="denoising noise sigma (0 disables)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)

    c = sub.add_parser("score", parents=[common], help="score records with trained model(s)")
    c.add_argument("manifest")
    c.add_argument("--model", required=True, help="output directory of a train run")
    c.add_argument("--method", choices=METHODS)
    c.add_argument("--k", type=int)
    c.add_argument("--dump-profiles", action="store_true",
                   help="also write the covariance profiles")

    e = sub.add_parser("evaluate", parents=[common], help="cross-validate or cross-evaluate")
    e.add_argument("train_manifest")
    e.add_argument("test_manifest", nargs="?")
    e.add_argument("--methods", default=None,
                   help="comma list of METHOD[:SIGMA], e.g. single:0,single:0.2,ensemble")
    e.add_argument("--folds", type=int)
    e.add_argument("--epochs", type=int)
    e.add_argument("--no-checkpoints", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _replace(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def effective_config(args) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    try:
        cfg = load_config(getattr(args, "config", None))
        seed = getattr(args, "seed", None)
        threads = getattr(args, "threads", None)
        cfg.run = _replace(cfg.run, seed=seed, threads=threads)
        if seed is not None:
            cfg.synth = _replace(cfg.synth, seed=seed)
            cfg.train = _replace(cfg.train, seed=seed)
        if args.command == "synth":
            cfg.synth = _replace(cfg.synth, n_event=args.n_event, n_noise=args.n_noise,
                                 snr_range=tuple(args.snr) if args.snr else None,
                                 noise_spectrum=args.noise_spectrum,
                                 glitch_fraction=args.glitch_fraction, name=args.name)
        if args.command in ("train", "score"):
            cfg.method = _replace(cfg.method, method=args.method, k=args.k)
        if args.command == "train":
            cfg.train = _replace(cfg.train, epochs=args.epochs, batch_size=args.batch_size,
                                 lr=args.lr, denoise_sigma=args.denoise)
        if args.command == "evaluate":
            cfg.run = _replace(cfg.run, folds=args.folds)
            cfg.train = _replace(cfg.train, epochs=args.epochs)
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    except (ValueError, TypeError) as err:
        raise UsageError(f"invalid configuration: {err}") from None
    if cfg.run.threads < 1:
        raise UsageError("--threads must be at least 1")
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(manifest, cfg: RunConfig):
    if not Path(manifest).is_file():
        raise DataError(f"manifest {manifest} not found")
    data = load_dataset(manifest)
    for err in data.errors:
        log.warning("skipped: %s", err)
    if not data:
        raise DataError(f"no usable records in {manifest}")
    return data


def parse_methods(text: str | None, cfg: RunConfig) -> list[MethodConfig]:
    """``METHOD[:SIGMA]`` items; the effective denoise sigma is pinned so names are explicit."""
    items = text.split(",") if text else [cfg.method.method]
    methods = []
    for item in items:
        name, _, sigma = item.strip().partition(":")
        try:
            m = dataclasses.replace(cfg.method, method=name,
                                    denoise_sigma=float(sigma) if sigma else None)
        except ValueError as err:
            raise UsageError(str(err)) from None
        methods.append(dataclasses.replace(m, denoise_sigma=effective_denoise(m, cfg.train)))
    return methods


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg.synth.name)
    manifest = build_dataset(cfg.synth, out)
    dump_config(cfg, out / "config.ini")
    print((out / "report.txt").read_text(), end="")
    counts = manifest.counts
    print(f"wrote {out / 'manifest.txt'} ({counts.get('event', 0)} events, "
          f"{counts.get('noise', 0)} noise)")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = _load(args.manifest, cfg)
    out = _out_dir(args, "model")
    method = cfg.method
    sigma = effective_denoise(method, cfg.train)
    train_cfg = dataclasses.replace(cfg.train, denoise_sigma=sigma)
    x = stack_samples([preprocess(w, cfg.preprocess, cfg.run.seed, mode="train") for w in data])
    members = method.k if method.method == "ensemble" else 1
    models, files = [], []
    for i in range(members):
        seed = train_cfg.seed * 1000 + i
        member_cfg = dataclasses.replace(train_cfg, seed=seed)
        suffix = f"_m{i}" if members > 1 else ""
        result = train(build_model(cfg.architecture, seed=seed), x, member_cfg,
                       on_epoch=lambda r, i=i: log.info("member %d epoch %d train %.5f val %.5f",
                                                        i, r["epoch"], r["train_loss"],
                                                        r["val_loss"]))
        save_model(result.model, out / f"model{suffix}.rcvw")
        write_history(out / f"history{suffix}.csv", result.history)
        models.append(result.model)
        files.append(f"model{suffix}.rcvw")
        print(f"member {i}: best epoch {result.best_epoch}, val loss {result.best_val_loss:.5f}")
    run = {"method": method.method, "k": members, "denoise_sigma": sigma, "models": files,
           "seed": cfg.run.seed, "n_records": len(data)}
    if method.method == "ensemble" and members > 1:
        p = cfg.projection
        proj = train_projections(models, x, p.epochs, p.lr, p.batch_size, p.anchor_weight,
                                 p.max_records, seed=cfg.run.seed)
        write_checkpoint(out / "projections.rcvw", _projection_tensors(proj))
        run["projections"] = "projections.rcvw"
        print(f"projections: loss {proj.history[0]:.5f} -> {proj.history[-1]:.5f}")
    (out / RUN_FILE).write_text(json.dumps(run, indent=2) + "\n")
    dump_config(cfg, out / "config.ini")
    return EXIT_OK


def _projection_tensors(proj: ProjectionSet) -> dict:
    tensors = {}
    for i, m in enumerate(proj.matrices):
        tensors[f"proj{i}.matrix"] = m
        tensors[f"proj{i}.mean"] = proj.latent_means[i]
        tensors[f"proj{i}.var"] = proj.latent_vars[i]
    return tensors


def _read_projections(path, k: int) -> ProjectionSet:
    t = read_checkpoint(path)
    try:
        return ProjectionSet([t[f"proj{i}.matrix"].astype("f8") for i in range(k)], [],
                             [t[f"proj{i}.mean"].astype("f8") for i in range(k)],
                             [t[f"proj{i}.var"].astype("f8") for i in range(k)])
    except KeyError as err:
        raise CheckpointError(f"{path}: missing tensor {err.args[0]}") from None


def cmd_score(args, cfg: RunConfig) -> int:
    model_dir = Path(args.model)
    run_file = model_dir / RUN_FILE
    if not run_file.is_file():
        raise DataError(f"{model_dir} is not a train output directory (no {RUN_FILE})")
    run = json.loads(run_file.read_text())
    if getattr(args, "config", None) is None and (model_dir / "config.ini").is_file():
        # The model directory's own config carries the architecture it was trained with.
        args.config = str(model_dir / "config.ini")
        cfg = effective_config(args)
    if args.method is None:
        # score the way the model directory was trained unless told otherwise
        k = run["k"] if run["method"] == "ensemble" and args.k is None else cfg.method.k
        cfg.method = dataclasses.replace(cfg.method, method=run["method"], k=k)
    method = cfg.method
    if method.method == "ensemble":
        if len(run["models"]) < method.k or "projections" not in run:
            raise DataError(f"{model_dir} holds {len(run['models'])} model(s) without a "
                            f"{method.k}-member ensemble")
        models = [load_model(model_dir / f, cfg.architecture) for f in run["models"][:method.k]]
        projections = _read_projections(model_dir / run["projections"], method.k)
    else:
        models = [load_model(model_dir / run["models"][0], cfg.architecture)]
        projections = None
    data = _load(args.manifest, cfg)
    records = onset_margin_filter(
        [preprocess(w, cfg.preprocess, cfg.run.seed, mode="test") for w in data],
        cfg.run.margin_seconds)
    if not records:
        raise DataError("every record was removed by the onset-margin filter")
    scores, profiles = score_method(method, models, records, cfg.trigger, projections,
                                    seed=cfg.run.seed)
    out = _out_dir(args, "scores")
    write_scores(out / "scores.csv", records, scores, method.name)
    if args.dump_profiles:
        write_profiles(out / "profiles.csv", records, profiles,
                       cfg.architecture.latent_rate(records[0].sample_rate_hz))
    dump_config(cfg, out / "config.ini")
    print(f"scored {len(records)} records ({len(data) - len(records)} filtered) "
          f"-> {out / 'scores.csv'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    methods = parse_methods(args.methods, cfg)
    if len({m.name for m in methods}) != len(methods):
        raise UsageError("method list has duplicates")
    train_data = _load(args.train_manifest, cfg)
    test_data = _load(args.test_manifest, cfg) if args.test_manifest else None
    out = _out_dir(args, "evaluation")
    settings = EvalSettings.from_run_config(cfg)
    train_name = Path(args.train_manifest).parent.name or "train"
    test_name = Path(args.test_manifest).parent.name if args.test_manifest else train_name
    if test_name == train_name and args.test_manifest:
        test_name += "-test"
    ckpt = None if args.no_checkpoints else out / "checkpoints"
    reports = evaluate(methods, train_data, test_data, settings, train_name, test_name, ckpt,
                       on_fold=lambda o: print(f"fold {o.fold}: " + ", ".join(
                           f"{k} {v:.4f}" for k, v in o.aucs.items())))
    write_report_csv(out / "report.csv", reports)
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    dump_config(cfg, out / "config.ini")
    print(table)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score,
            "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(getattr(args, "verbose", 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        with threadpool_limits(limits=cfg.run.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as err:
        print(f"latentcov: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WaveformError, CheckpointError, ShapeError) as err:
        print(f"latentcov: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"latentcov: runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
