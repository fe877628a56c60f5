"""Command-line runner.

    seatlab train --config run.toml --train.method fgsm_at
    seatlab boundary --config run.toml --samples 500
    seatlab lambda-sweep 0,0.1,0.3,0.5 --config run.toml

Artifacts land in ``<output.directory>/run-<train digest>/``; each file name
or header carries the digest of the configuration that produced it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import data, diagnostics, training
from .attacks import AttackSpec
from .config import RunConfig, describe_defaults, load_config, parse_overrides
from .models import Model

log = logging.getLogger("seatlab")

SWEEP_COLUMNS = ("lambda", "lower", "upper", "sa", "ra", "gap")


class CliError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output.directory) / f"run-{cfg.train_digest()}"


def load_split(cfg: RunConfig, split: str) -> data.Dataset:
    if not cfg.data.path:
        raise CliError("[data] path is required for this command")
    subset = cfg.data.train_subset if split == "train" else cfg.data.test_subset
    if cfg.data.dataset == "mnist":
        return data.load_mnist(cfg.data.path, split, subset or None)
    return data.load_cifar10(cfg.data.path, split, subset or None)


def input_files(cfg: RunConfig, split: str):
    if cfg.data.dataset == "mnist":
        return data.find_mnist_files(cfg.data.path, split)
    names = data.CIFAR_TRAIN if split == "train" else data.CIFAR_TEST
    return [p for p in (Path(cfg.data.path) / n for n in names) if p.exists()]


def checkpoint_for(cfg: RunConfig, explicit=None) -> Path:
    path = Path(explicit) if explicit else run_dir(cfg) / "final.ckpt"
    if not path.exists():
        raise CliError(f"no checkpoint at {path}; run `seatlab train` with this config first "
                       "or pass --checkpoint")
    return path


def load_trained(cfg: RunConfig, explicit=None) -> tuple[Model, Path]:
    path = checkpoint_for(cfg, explicit)
    model, _ = data.load_model(path)
    return model, path


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, digest: str, inputs, artifacts,
                   seconds: float, extra=None) -> Path:
    """JSON manifest of inputs, digests and outputs.  Only ``timings`` varies between
    identical runs."""
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_digest": digest,
        "train_digest": cfg.train_digest(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {Path(p).name: sha256_file(p) for p in artifacts},
        "timings": {"wall_seconds": round(seconds, 3)},
    }
    if extra:
        manifest["results"] = extra
    path = out_dir / f"manifest-{command}-{digest}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return path


def write_grid(grid: diagnostics.LandscapeGrid, path: Path, digest: str) -> Path:
    """Matrix CSV: a '#' metadata line, a header of v coefficients, then one row per k."""
    meta = {"kind": grid.kind, "config_digest": digest, **grid.meta}
    rows = [{"k": float(k), **{f"v={v:.6f}": grid.values[i, j] for j, v in enumerate(grid.v)}}
            for i, k in enumerate(grid.k)]
    columns = ["k"] + [f"v={v:.6f}" for v in grid.v]
    if grid.values.dtype.kind in "iu":
        rows = [{c: (str(int(r[c])) if c != "k" else r[c]) for c in columns} for r in rows]
    return data.write_table(rows, columns, path, json.dumps(meta, sort_keys=True, default=float))


def read_grid(path) -> diagnostics.LandscapeGrid:
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0][2:])
    header = lines[1].split(",")
    v = np.array([float(h[2:]) for h in header[1:]])
    body = np.array([[float(c) for c in ln.split(",")] for ln in lines[2:]])
    return diagnostics.LandscapeGrid(meta.pop("kind"), body[:, 0], v, body[:, 1:], meta)


# -- commands ----------------------------------------------------------------------------

def _train_model(cfg: RunConfig, out: Path, echo=True):
    train_set = load_split(cfg, "train")
    spec = cfg.model
    if train_set.images.shape[1:] != spec.input_shape:
        raise CliError(f"dataset images are {train_set.images.shape[1:]} but [model] "
                       f"input_shape is {spec.input_shape}")

    def on_epoch(rec, _model):
        if echo:
            print(f"epoch {rec.epoch:3d}  sa={rec.sa:.4f}  ra_pgd20={rec.ra_pgd20:.4f}  "
                  f"acc_fgsm={rec.acc_fgsm:.4f}  mean_xi={rec.mean_xi:.5f}  "
                  f"loss={rec.train_loss:.4f}  lr={rec.lr:.4f}", flush=True)

    digest = cfg.train_digest()
    result = training.train(cfg.train, train_set, spec, checkpoint_dir=out / "checkpoints",
                            on_epoch=on_epoch, config_digest=digest)
    metrics = data.write_metrics(result.history, out / "metrics.csv")
    final = out / "final.ckpt"
    shutil.copyfile(result.checkpoints[-1], final)
    cols = list(result.batch_log[0])
    batch_log = data.write_table(result.batch_log, cols, out / "batch_log.csv",
                                 f"config_digest={digest}")
    return result, [metrics, final, batch_log, *result.checkpoints]


def cmd_train(cfg: RunConfig, args) -> dict:
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result, artifacts = _train_model(cfg, out)
    co = diagnostics.detect_catastrophic_overfitting(result.history) \
        if len(result.history) >= 2 else None
    summary = {"final_sa": result.history[-1].sa, "final_ra_pgd20": result.history[-1].ra_pgd20,
               "catastrophic_overfitting_epoch": co}
    write_manifest(out, "train", cfg, cfg.train_digest(), input_files(cfg, "train"), artifacts,
                   time.perf_counter() - start, summary)
    print(f"run directory: {out}")
    print(f"catastrophic overfitting: {'epoch ' + str(co) if co is not None else 'none'}")
    return summary


def _eval_specs(cfg: RunConfig, battery: bool) -> dict:
    specs = {"ra": cfg.attack}
    if battery:
        eps, alpha = cfg.attack.eps, cfg.attack.alpha
        specs.update({
            "fgsm": AttackSpec("fgsm", eps=eps),
            "pgd20": AttackSpec("pgd", eps=eps, alpha=alpha, steps=20),
            "pgd50x10": AttackSpec("pgd", eps=eps, alpha=alpha, steps=50, restarts=10),
        })
    return specs


def cmd_eval(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    test = load_split(cfg, "test")
    rng = np.random.default_rng(cfg.output.seed)
    acc = diagnostics.accuracy_battery(model, test, _eval_specs(cfg, args.battery), rng)
    acc["sa"] = acc.pop("clean")
    digest = cfg.digest(extra={"command": "eval", "battery": args.battery, "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval-{digest}.json"
    path.write_text(json.dumps({"config_digest": digest, **acc}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", cfg, digest, [ckpt, *input_files(cfg, "test")], [path],
                   time.perf_counter() - start, acc)
    print("  ".join(f"{k.upper() if k in ('sa', 'ra') else k}={v:.4f}" for k, v in acc.items()))
    return acc


def _sample(cfg, index):
    test = load_split(cfg, "test")
    if not 0 <= index < len(test):
        raise CliError(f"--index {index} outside the test set of {len(test)}")
    return test, test.images[index], int(test.labels[index])


def cmd_landscape(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    _, x, y = _sample(cfg, args.index)
    grid = diagnostics.input_landscape(model, x, y, cfg.attack.eps, args.resolution,
                                       cfg.output.seed)
    digest = cfg.digest(extra={"command": "landscape", "index": args.index,
                               "resolution": args.resolution, "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = write_grid(grid, out / f"landscape-{digest}.csv", digest)
    res = {"origin": float(grid.origin), "max": float(grid.values.max())}
    write_manifest(out, "landscape", cfg, digest, [ckpt], [path], time.perf_counter() - start, res)
    print(f"input landscape -> {path}  (clean loss {res['origin']:.4f}, max {res['max']:.4f})")
    return res


def cmd_weightscape(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    test = load_split(cfg, "test").head(args.samples)
    grid = diagnostics.weight_landscape(model, test, cfg.attack.eps, args.mode, args.span,
                                        args.resolution, cfg.output.seed)
    digest = cfg.digest(extra={"command": "weightscape", "mode": args.mode, "span": args.span,
                               "resolution": args.resolution, "samples": args.samples,
                               "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = write_grid(grid, out / f"weightscape-{digest}.csv", digest)
    res = {"origin": float(grid.origin), "spread": float(grid.values.max() - grid.values.min())}
    write_manifest(out, "weightscape", cfg, digest, [ckpt], [path],
                   time.perf_counter() - start, res)
    print(f"weight landscape -> {path}  (loss at theta {res['origin']:.4f}, "
          f"spread {res['spread']:.4f})")
    return res


def cmd_boundary(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    test, x, y = _sample(cfg, args.index)
    result = diagnostics.decision_boundary(model, x, y, cfg.attack.eps, args.resolution,
                                           cfg.output.seed)
    rate = diagnostics.distortion_rate(model, test.head(args.samples), cfg.attack.eps,
                                       args.resolution)
    flagged = rate >= args.threshold
    digest = cfg.digest(extra={"command": "boundary", "index": args.index, "samples": args.samples,
                               "resolution": args.resolution, "threshold": args.threshold,
                               "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = write_grid(result.grid, out / f"boundary-{digest}.csv", digest)
    res = {"correct_fraction": result.correct_fraction, "sample_distorted": result.distorted,
           "distortion_rate": rate, "distortion_flag": bool(flagged)}
    write_manifest(out, "boundary", cfg, digest, [ckpt], [path], time.perf_counter() - start, res)
    print(f"decision grid -> {path}")
    print(f"correct-decision area {result.correct_fraction:.4f}; distorted samples "
          f"{rate:.4f} of {min(args.samples, len(test))}; "
          f"distortion flag: {'SET' if flagged else 'clear'}")
    return res


def cmd_lipschitz(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    test = load_split(cfg, "test").head(args.samples)
    rep = diagnostics.empirical_lipschitz(model, test, cfg.attack.eps, args.steps,
                                          seed=cfg.output.seed)
    digest = cfg.digest(extra={"command": "lipschitz", "steps": args.steps,
                               "samples": args.samples, "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    res = {"lower": rep.lower, "upper": rep.upper, "eps": rep.eps, "steps": rep.steps,
           "step_size": rep.step_size, **rep.meta}
    path = out / f"lipschitz-{digest}.json"
    path.write_text(json.dumps({"config_digest": digest, **res}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "lipschitz", cfg, digest, [ckpt], [path], time.perf_counter() - start, res)
    print(f"empirical Lipschitz: lower={rep.lower:.4f}  upper={rep.upper:.4f}")
    return res


def cmd_xi(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    model, ckpt = load_trained(cfg, args.checkpoint)
    train_set = load_split(cfg, "train")
    if args.samples:
        train_set = train_set.head(args.samples)
    xi = diagnostics.mean_linearity_error(model, train_set, cfg.attack.eps)
    digest = cfg.digest(extra={"command": "xi", "samples": args.samples, "ckpt": str(ckpt)})
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"xi-{digest}.json"
    res = {"mean_xi": xi, "eps": cfg.attack.eps, "samples": len(train_set)}
    path.write_text(json.dumps({"config_digest": digest, **res}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "xi", cfg, digest, [ckpt], [path], time.perf_counter() - start, res)
    print(f"mean linearity error {xi:.6f} over {len(train_set)} samples")
    return res


def parse_lambdas(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"bad lambda list {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise CliError("lambda list must be non-empty and non-negative")
    return values


def sweep_row(cfg: RunConfig, lam, model, train_set, test_set, lip_steps, seed) -> dict:
    rng = np.random.default_rng(seed)
    rep = diagnostics.empirical_lipschitz(model, test_set, cfg.attack.eps, lip_steps, seed=seed)
    test_acc = diagnostics.robust_accuracy(model, test_set, cfg.attack, rng)
    train_acc = diagnostics.robust_accuracy(model, train_set, cfg.attack, rng)
    return {"lambda": lam, "lower": rep.lower, "upper": rep.upper, "sa": test_acc["sa"],
            "ra": test_acc["ra"], "gap": train_acc["ra"] - test_acc["ra"]}


def cmd_lambda_sweep(cfg: RunConfig, args) -> dict:
    start = time.perf_counter()
    lams = parse_lambdas(args.lambdas)
    test_set = load_split(cfg, "test").head(args.samples)
    rows, artifacts, inputs = [], [], list(input_files(cfg, "train"))
    for lam in lams:
        sub = cfg.with_("train", lam=lam)
        out = run_dir(sub)
        final = out / "final.ckpt"
        if final.exists() and data.load_checkpoint(final).config_digest == sub.train_digest():
            log.info("reusing %s", final)
        else:
            out.mkdir(parents=True, exist_ok=True)
            print(f"training lambda={lam} -> {out}", flush=True)
            _train_model(sub, out, echo=args.verbose)
        model, _ = data.load_model(final)
        train_set = load_split(sub, "train").head(args.samples)
        rows.append(sweep_row(sub, lam, model, train_set, test_set, args.steps, cfg.output.seed))
        inputs.append(final)
        print("  ".join(f"{k}={rows[-1][k]:.4f}" for k in SWEEP_COLUMNS), flush=True)
    digest = cfg.digest(extra={"command": "lambda-sweep", "lambdas": lams,
                               "samples": args.samples, "steps": args.steps})
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    path = data.write_table(rows, SWEEP_COLUMNS, out / f"lambda_sweep-{digest}.csv",
                            f"config_digest={digest}")
    artifacts.append(path)
    write_manifest(out, "lambda-sweep", cfg, digest, inputs, artifacts,
                   time.perf_counter() - start, {"rows": rows})
    print(f"lambda sweep -> {path}")
    return {"rows": rows, "path": str(path)}


def cmd_prepare_mnist(_cfg, args) -> dict:
    path = data.export_mnist_subset(args.out, args.test_size, args.seed)
    print(f"wrote MNIST IDX files to {path}")
    return {"path": str(path)}


def cmd_defaults(_cfg, _args) -> dict:
    print(describe_defaults())
    return {}


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "landscape": cmd_landscape,
    "weightscape": cmd_weightscape, "boundary": cmd_boundary, "lipschitz": cmd_lipschitz,
    "xi": cmd_xi, "lambda-sweep": cmd_lambda_sweep, "prepare-mnist": cmd_prepare_mnist,
    "defaults": cmd_defaults,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seatlab", description="Single-step adversarial training laboratory.",
        epilog="Any config value can be overridden with --section.key value, "
               "e.g. --train.lambda 0.3 or --attack.eps 0.1.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, checkpoint=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--no-margin-inner", action="store_true",
                       help="use cross-entropy instead of margin loss for the inner attack")
        p.add_argument("-v", "--verbose", action="store_true")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file (default: this config's run)")
        return p

    add("train", "train a model with [train] method", checkpoint=False)
    p = add("eval", "accuracy on the test split under the [attack] attack")
    p.add_argument("--battery", action="store_true", help="also FGSM, PGD-20 and PGD-50-10")
    for name, text in (("landscape", "input-space loss grid around one test sample"),
                       ("boundary", "decision grid and distortion flag")):
        p = add(name, text)
        p.add_argument("--index", type=int, default=0, help="test sample index")
        p.add_argument("--resolution", type=int, default=diagnostics.GRID_RESOLUTION)
        if name == "boundary":
            p.add_argument("--samples", type=int, default=500,
                           help="test samples scanned for the distortion rate")
            p.add_argument("--threshold", type=float, default=DISTORTION_THRESHOLD,
                           help="distortion rate at which the model-level flag is set")
    p = add("weightscape", "filter-normalized weight-space loss grid")
    p.add_argument("--mode", choices=("1d", "2d"), default="1d")
    p.add_argument("--span", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=diagnostics.GRID_RESOLUTION)
    p.add_argument("--samples", type=int, default=500)
    p = add("lipschitz", "empirical Lipschitz lower/upper bounds")
    p.add_argument("--steps", type=int, default=diagnostics.LIPSCHITZ_STEPS)
    p.add_argument("--samples", type=int, default=500)
    p = add("xi", "mean linearity error over the training split")
    p.add_argument("--samples", type=int, default=0, help="0 uses the whole split")
    p = add("lambda-sweep", "train and evaluate over a list of lambda values", checkpoint=False)
    p.add_argument("lambdas", help="comma-separated, e.g. 0,0.1,0.3,0.5")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--steps", type=int, default=diagnostics.LIPSCHITZ_STEPS)
    p = sub.add_parser("prepare-mnist", help="export the bundled 5000-image MNIST sample as IDX")
    p.add_argument("--out", required=True)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    sub.add_parser("defaults", help="print every configuration key with its default")
    return parser


# model-level flag: share of scanned samples showing the distortion pattern
DISTORTION_THRESHOLD = 0.10


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command not in ("prepare-mnist", "defaults"):
            overrides = parse_overrides(rest)
            if args.no_margin_inner:
                overrides.setdefault("train", {})["inner_loss"] = "ce"
            cfg = load_config(args.config, overrides)
        elif rest:
            parser.error(f"unrecognized arguments: {' '.join(rest)}")
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # every module error becomes a nonzero exit
        print(f"seatlab {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
