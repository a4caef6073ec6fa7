"""Command-line entry point: ``graspref <subcommand> [flags]``.

Settings resolve in order: built-in defaults, then ``--config`` (a JSON
object), then ``GRASPREF_<KEY>`` environment variables, then explicit flags.
Every run writes ``run_manifest.json`` with the resolved settings into its
output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ChecksumError, ConfigError, GraspRefError

log = logging.getLogger("graspref")

ENV_PREFIX = "GRASPREF_"

COMMON = {"seed": 0, "out": None, "verbose": 0}
DEFAULTS = {
    "gen-data": {
        "family": "Superquadric", "train_objects": 20, "test_objects": 5, "views_per_shape": 36,
        "elevations": [0.0, 50.0], "depth_noise": 0.0, "cloud_points": 2048,
    },
    "train-recon": {
        "data": None, "epochs": 100, "learning_rate": 1e-3, "batch_size": 32, "domain_samples": 512,
        "optimizer": "adam", "momentum": 0.0, "weight_decay": 0.0, "lr_decay": 1.0, "resume": None,
    },
    "train-proposal": {
        "data": None, "epochs": 300, "learning_rate": 1e-3, "batch_size": 32, "lambda_t": 1.0, "lambda_r": 0.01,
        "optimizer": "adam", "momentum": 0.0, "weight_decay": 1.0, "lr_decay": 1.0, "resume": None,
    },
    "eval": {
        "data": None, "models": None, "scenario": "HiddenGrasp", "combinations": None, "trials_per_cell": 25,
        "objects": None, "jobs": 1,
    },
    "report": {"results": None},
}


def _coerce(text, like):
    """Parse an environment string using the type of the default it overrides."""
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, list) or like is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def resolve_config(command, args, environ=None):
    environ = os.environ if environ is None else environ
    defaults = dict(COMMON, **DEFAULTS[command])
    cfg = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("the config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            try:
                cfg[key] = _coerce(env, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"{ENV_PREFIX}{key.upper()}: {exc}") from exc
    for key, value in vars(args).items():
        if key in defaults and value is not None:
            cfg[key] = value
    if cfg.get("out") is None:
        raise ConfigError("an output directory is required (--out, config 'out' or GRASPREF_OUT)")
    return cfg


def write_manifest(out, command, cfg, extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "version": __version__, "config": cfg}
    if extra:
        body.update(extra)
    (out / "run_manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True, default=str) + "\n")


def _out_dir(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"'{key}' is required for this command")
    p = Path(cfg[key])
    if not p.exists():
        raise ConfigError(f"{key} path {p} does not exist")
    return p


# -- subcommands -------------------------------------------------------------------------------

def cmd_gen_data(cfg):
    from .propose import GraspLibrary
    from .shapes import BOX, SUPERQUADRIC, random_shape
    from .synth import ViewpointPolicy, labels_from_examples, make_dataset, save_dataset

    family = {"superquadric": SUPERQUADRIC, "shoe": SUPERQUADRIC, "box": BOX}.get(str(cfg["family"]).lower())
    if family is None:
        raise ConfigError(f"unknown family {cfg['family']!r}")
    n_train, n_test = int(cfg["train_objects"]), int(cfg["test_objects"])
    if n_train + n_test < 1 or n_train < 0 or n_test < 0:
        raise ConfigError("need at least one object")
    out = _out_dir(cfg)
    rng = np.random.default_rng([int(cfg["seed"]), 7])
    prefix = "box" if family == BOX else "shoe"
    shapes = [random_shape(family, rng, f"{prefix}{i:02d}") for i in range(n_train + n_test)]
    test_ids = [s.id for s in shapes[n_train:]]
    policy = ViewpointPolicy(elevations_deg=tuple(float(e) for e in cfg["elevations"]),
                             depth_noise=float(cfg["depth_noise"]), cloud_points=int(cfg["cloud_points"]))
    examples = make_dataset(shapes, int(cfg["views_per_shape"]), policy, int(cfg["seed"]), test_ids)
    labels = labels_from_examples(examples)
    save_dataset(examples, shapes, out / "dataset", labels)
    GraspLibrary.from_labels(shapes, labels, seed=int(cfg["seed"])).save(out / "library")
    write_manifest(out, "gen-data", cfg, {"examples": len(examples), "objects": [s.id for s in shapes],
                                          "test_objects": test_ids})
    print(f"wrote {len(examples)} examples for {len(shapes)} objects ({len(test_ids)} held out) to {out}")
    return 0


def _dataset_dir(cfg):
    p = _require(cfg, "data")
    return p / "dataset" if (p / "dataset" / "manifest.json").exists() else p


def _train_common(cfg):
    from .nn import TrainConfig
    return TrainConfig(learning_rate=float(cfg["learning_rate"]), batch_size=int(cfg["batch_size"]),
                       epochs=int(cfg["epochs"]), seed=int(cfg["seed"]), optimizer=cfg["optimizer"],
                       momentum=float(cfg["momentum"]), weight_decay=float(cfg["weight_decay"]),
                       lr_decay=float(cfg["lr_decay"]))


def _write_curve(path, curve, start):
    lines = ["epoch,loss"] + [f"{start + i},{v!r}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(cfg, which):
    from dataclasses import replace

    from .geometry import LossWeights
    from .nn import Optimizer
    from .synth import load_dataset, split

    out = _out_dir(cfg)
    examples, _, _ = load_dataset(_dataset_dir(cfg))
    train = split(examples, "train")
    if not train:
        raise ConfigError("the dataset has no training examples")
    tcfg = _train_common(cfg)
    if which == "recon":
        from .recon import ReconModel, evaluate_chamfer, load_recon, save_recon, train_recon
        tcfg = replace(tcfg, domain_samples=int(cfg["domain_samples"]))
        trainer, saver = train_recon, save_recon
        name = "recon"
    else:
        from .propose import ProposalModel, load_proposal, proposal_errors, save_proposal, train_proposal
        tcfg = replace(tcfg, loss_weights=LossWeights(float(cfg["lambda_t"]), float(cfg["lambda_r"])))
        trainer, saver = train_proposal, save_proposal
        name = "proposal"
    prev_curve = np.zeros(0)
    start = 0
    if cfg.get("resume"):
        loader = load_recon if which == "recon" else load_proposal
        model, header, vectors = loader(cfg["resume"])
        opt = Optimizer(len(vectors["params"]), tcfg)
        opt.restore(vectors, header)
        start = int(header.get("epoch", 0))
        prev_curve = vectors.get("curve", np.zeros(0))
    else:
        model = (ReconModel.create(seed=tcfg.seed, domain_samples=tcfg.domain_samples) if which == "recon"
                 else ProposalModel.create(seed=tcfg.seed))
        opt = Optimizer(model.hypernet.mlp.n_params if which == "recon" else model.net.n_params, tcfg)
    model, curve = trainer(model, train, tcfg, optimizer=opt, epoch_offset=start)
    full = np.concatenate([prev_curve, curve])
    saver(out / f"{name}.ckpt", model, opt, full, start + tcfg.epochs)
    _write_curve(out / f"{name}_loss.csv", full, 0)
    test = split(examples, "test")
    extra = {"final_train_loss": float(curve[-1]), "epochs_total": start + tcfg.epochs}
    if test:
        if which == "recon":
            extra["test_chamfer"] = evaluate_chamfer(model, test[::max(1, len(test) // 40)], n=1024)
        else:
            pos, rl = proposal_errors(model, test)
            extra["test_position_error"] = float(pos.mean())
            extra["test_rotation_loss"] = float(rl.mean())
    write_manifest(out, f"train-{name}", cfg, extra)
    print(f"{name}: final train loss {curve[-1]:.6g} after {start + tcfg.epochs} epochs"
          + "".join(f"; {k} {v:.6g}" for k, v in extra.items() if k.startswith("test")))
    return 0


def load_models(cfg, combinations):
    from .bench import Models, required_models
    from .propose import GraspLibrary, load_proposal
    from .recon import load_recon

    need = required_models(combinations)
    mdir = Path(cfg["models"]) if cfg.get("models") else None
    data = Path(cfg["data"])
    models = Models()
    missing = []
    if "proposal" in need:
        p = mdir / "proposal.ckpt" if mdir else None
        if p is None or not p.exists():
            missing.append("proposal.ckpt")
        else:
            models.proposal = load_proposal(p)[0]
    if "recon" in need:
        p = mdir / "recon.ckpt" if mdir else None
        if p is None or not p.exists():
            missing.append("recon.ckpt")
        else:
            models.recon = load_recon(p)[0]
    lib_dir = data / "library"
    if (lib_dir / "library.txt").exists():
        models.library = GraspLibrary.load(lib_dir)
    elif "library" in need:
        missing.append("library/library.txt")
    if missing:
        raise ConfigError(f"missing models: {', '.join(missing)}")
    return models


def cmd_eval(cfg):
    from .bench import (MATRIX, ExperimentConfig, format_report, parse_combination, records_to_csv, run_matrix,
                        summarize, summary_to_csv, timings_to_csv)
    from .synth import load_dataset

    out = _out_dir(cfg)
    ddir = _dataset_dir(cfg)
    _, shapes, labels = load_dataset(ddir)
    combos = cfg.get("combinations")
    if combos:
        if isinstance(combos, str):
            combos = [c for c in combos.split(",") if c.strip()]
        combos = tuple(parse_combination(c) for c in combos)
    else:
        combos = MATRIX
    cfg["data"] = str(Path(cfg["data"]))
    models = load_models(cfg, combos)
    models.labels = labels
    manifest = json.loads((ddir / "manifest.json").read_text())
    test_ids = sorted({r["object_id"] for r in manifest["examples"] if r["split"] == "test"})
    if cfg.get("objects"):
        wanted = cfg["objects"].split(",") if isinstance(cfg["objects"], str) else list(cfg["objects"])
        unknown = sorted(set(wanted) - {s.id for s in shapes})
        if unknown:
            raise ConfigError(f"unknown objects: {', '.join(unknown)}")
        shapes = [s for s in shapes if s.id in wanted]
    scenarios = cfg["scenario"].split(",") if isinstance(cfg["scenario"], str) else list(cfg["scenario"])
    records = []
    for sc in scenarios:
        ecfg = ExperimentConfig(sc.strip(), tuple(shapes), tuple(test_ids), combos, int(cfg["trials_per_cell"]),
                                int(cfg["seed"]))
        records += run_matrix(ecfg, models, jobs=int(cfg["jobs"]))
    (out / "results.csv").write_text(records_to_csv(records))
    (out / "timings.csv").write_text(timings_to_csv(records))
    rep = summarize(records)
    (out / "summary.csv").write_text(summary_to_csv(rep))
    text = format_report(rep)
    (out / "report.txt").write_text(text)
    write_manifest(out, "eval", cfg, {"records": len(records)})
    print(text)
    return 0


def cmd_report(cfg):
    from .bench import format_report, records_from_csv, summarize, summary_to_csv

    out = _out_dir(cfg)
    paths = cfg["results"] if isinstance(cfg["results"], list) else str(cfg["results"]).split(",")
    records = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise ConfigError(f"results file {path} does not exist")
        records += records_from_csv(path.read_text())
    rep = summarize(records)
    (out / "summary.csv").write_text(summary_to_csv(rep))
    text = format_report(rep)
    (out / "report.txt").write_text(text)
    write_manifest(out, "report", cfg, {"records": len(records)})
    print(text)
    return 0


# -- argument parsing ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="graspref", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"graspref {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="count")
        return sp

    g = common(sub.add_parser("gen-data", help="render a synthetic dataset and grasp library"))
    g.add_argument("--family", choices=["Superquadric", "Box", "superquadric", "box", "shoe"])
    g.add_argument("--train-objects", type=int, dest="train_objects")
    g.add_argument("--test-objects", type=int, dest="test_objects")
    g.add_argument("--views", type=int, dest="views_per_shape")

    for name in ("train-recon", "train-proposal"):
        t = common(sub.add_parser(name, help=f"train the {name.split('-')[1]} network"))
        t.add_argument("--data", help="directory written by gen-data")
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float, dest="learning_rate")
        t.add_argument("--batch-size", type=int, dest="batch_size")
        t.add_argument("--resume", help="checkpoint to continue from")

    e = common(sub.add_parser("eval", help="run the proposal x refinement matrix"))
    e.add_argument("--data", help="directory written by gen-data")
    e.add_argument("--models", help="directory holding recon.ckpt and proposal.ckpt")
    e.add_argument("--scenario", help="VisibleGrasp, HiddenGrasp, SimBoxes (comma separated)")
    e.add_argument("--combinations", help="e.g. GPNet+SRNet,Naive+Visible")
    e.add_argument("--trials", type=int, dest="trials_per_cell")
    e.add_argument("--objects", help="comma separated object ids")
    e.add_argument("--jobs", type=int)

    r = common(sub.add_parser("report", help="summarise results files"))
    r.add_argument("--results", help="results.csv (comma separated for several)")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        logging.basicConfig(level=logging.WARNING - 10 * min(int(cfg.get("verbose") or 0), 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-recon":
            return cmd_train(cfg, "recon")
        if args.command == "train-proposal":
            return cmd_train(cfg, "proposal")
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_report(cfg)
    except ChecksumError as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, GraspRefError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
