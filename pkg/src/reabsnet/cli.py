"""Command-line entry point: reproducible train / attack / evaluate runs.

Subcommands, in pipeline order:

  train-master   distill the master classifier from the training split
  gen-adv        generate (and cache) adversarial examples against the master
  train-guardian train the detector on naturals paired with cached adversarials
  evaluate       run the configured attacks and emit report + trace files
  classify       run one test image through the full defense
  verify-grad    finite-difference gate over random small networks

Every run writes a manifest with the config digest and checkpoint digests so
two runs are comparable.  Exit codes: 0 ok, 2 usage, 3 config, 4 data,
5 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, diffcore
from .attacks import AttackConfig, run_attack
from .data import (
    CacheRecord,
    build_guardian_dataset,
    load_split,
    read_adversarial_cache,
    write_adversarial_cache,
    write_cache_metadata,
)
from .errors import (
    CacheFormatError,
    CheckpointFormatError,
    IdxFormatError,
    RunConfigError,
    TrainingDivergedError,
)
from .evaluation import (
    EvalReport,
    EvalRow,
    emit_report,
    evaluate_attack_bounds,
    natural_accuracy,
    select_subset,
)
from .models import (
    NetModel,
    TrainConfig,
    build_guardian,
    build_master,
    distill,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pipeline import ReabsNet, trace_record, write_trace_log

_REQUIRED = object()

DEFAULTS = {
    "data": {
        "train_images": _REQUIRED,
        "train_labels": _REQUIRED,
        "test_images": _REQUIRED,
        "test_labels": _REQUIRED,
        "train_size": 55_000,
        "val_size": 5_000,
    },
    "seed": _REQUIRED,
    "out_dir": "runs",
    "master": {
        "epochs": 20,
        "batch_size": 128,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "temperature": 100.0,
        "train_limit": None,
    },
    "guardian": {
        "epochs": 20,
        "batch_size": 128,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "train_limit": None,
    },
    "attacks": {
        "fgsm": {"epsilon": 0.25},
        "deepfool": {"max_iter": 50, "overshoot": 0.02},
        "cw_l2": {"kappa": 0.0, "initial_c": 1.0, "c_lo": 1e-3, "c_hi": 1e3,
                  "search_steps": 6, "max_iter": 200, "learning_rate": 0.01},
        "cw_linf": {"kappa": 0.0, "c": 5.0, "tau0": 1.0, "shrink": 0.9,
                    "max_outer": 25, "max_iter": 200, "learning_rate": 0.01},
    },
    "revision": {"budget": 50, "overshoot": 0.02, "norm": 2.0},
    "eval": {
        "n": 200,
        "n_linf": 50,
        "eps_bounds": [],
        "rows": [
            {"method": "fgsm", "targeted": False},
            {"method": "deepfool", "targeted": False},
            {"method": "cw_l2", "targeted": False},
            {"method": "cw_l2", "targeted": True},
            {"method": "cw_linf", "targeted": False},
            {"method": "cw_linf", "targeted": True},
        ],
    },
}


def _merge(defaults, given, path=""):
    if isinstance(defaults, dict):
        if not isinstance(given, dict):
            raise RunConfigError(f"config key {path or '<root>'}: expected an object")
        for key in given:
            if key not in defaults:
                raise RunConfigError(f"unknown config key {path + key!r}")
        out = {}
        for key, default in defaults.items():
            if key in given:
                out[key] = _merge(default, given[key], f"{path}{key}.")
            elif default is _REQUIRED:
                raise RunConfigError(f"missing required config key {path + key!r}")
            else:
                out[key] = default
        return out
    if defaults is _REQUIRED or defaults is None:
        return given
    if isinstance(defaults, bool):
        if not isinstance(given, bool):
            raise RunConfigError(f"config key {path[:-1]!r}: expected a boolean")
        return given
    if isinstance(defaults, (int, float)):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise RunConfigError(f"config key {path[:-1]!r}: expected a number")
        return type(defaults)(given) if not isinstance(defaults, float) else float(given)
    if isinstance(defaults, str):
        if not isinstance(given, str):
            raise RunConfigError(f"config key {path[:-1]!r}: expected a string")
        return given
    if isinstance(defaults, list):
        if not isinstance(given, list):
            raise RunConfigError(f"config key {path[:-1]!r}: expected a list")
        if defaults and isinstance(defaults[0], dict):
            template = {"method": _REQUIRED, "targeted": False}
            return [_merge(template, item, f"{path}[{i}].") for i, item in enumerate(given)]
        return given
    return given


def load_config(path) -> dict:
    """Parse and validate a run-config JSON file; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise RunConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise RunConfigError(f"config is not valid JSON: {err}")
    config = _merge(DEFAULTS, raw)
    if not isinstance(config["seed"], int):
        raise RunConfigError("config key 'seed': expected an integer")
    for key, value in config["data"].items():
        if key.endswith(("_images", "_labels")) and not Path(value).exists():
            raise RunConfigError(f"config key 'data.{key}': path does not exist: {value}")
    return config


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _attack_config(config: dict, method: str, targeted: bool) -> AttackConfig:
    params = config["attacks"][method]
    if method == "fgsm":
        return AttackConfig(method=method, targeted=False, epsilon=params["epsilon"])
    if method == "deepfool":
        return AttackConfig(method=method, targeted=False,
                            max_iter=params["max_iter"], overshoot=params["overshoot"])
    if method == "cw_l2":
        return AttackConfig(method=method, targeted=targeted, kappa=params["kappa"],
                            initial_c=params["initial_c"], c_lo=params["c_lo"],
                            c_hi=params["c_hi"], search_steps=params["search_steps"],
                            max_iter=params["max_iter"], learning_rate=params["learning_rate"])
    if method == "cw_linf":
        return AttackConfig(method=method, targeted=targeted, kappa=params["kappa"],
                            c=params["c"], tau0=params["tau0"], shrink=params["shrink"],
                            max_outer=params["max_outer"], max_iter=params["max_iter"],
                            learning_rate=params["learning_rate"])
    raise RunConfigError(f"unknown attack method {method!r}")


def _train_config(section: dict, seed: int, temperature: float | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        learning_rate=section["learning_rate"],
        momentum=section["momentum"],
        seed=seed,
        temperature=temperature if temperature is not None else section["temperature"],
    )


def _out_dir(args, config) -> Path:
    out = Path(args.out if args.out else config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict) -> None:
    digests = {}
    for name in ("master", "teacher", "guardian"):
        path = out / f"{name}.ckpt"
        if path.exists():
            digests[name] = load_checkpoint(path).digest()
    manifest = {
        "command": command,
        "config_digest": config_digest(config),
        "checkpoint_digests": digests,
        "seed": config["seed"],
        "versions": {"reabsnet": __version__, "numpy": np.__version__},
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_data(config):
    d = config["data"]
    return load_split(d["train_images"], d["train_labels"], d["test_images"],
                      d["test_labels"], seed=config["seed"],
                      train_size=d["train_size"], val_size=d["val_size"])


def _limited(images, labels, limit):
    if limit is None:
        return images, labels
    return images[:limit], labels[:limit]


def _require_absent(path: Path, force: bool):
    if path.exists() and not force:
        raise RunConfigError(
            f"{path} already exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train_master(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args, config)
    _require_absent(out / "master.ckpt", args.force)
    ds = _load_data(config)
    images, labels = _limited(ds.train_images, ds.train_labels,
                              config["master"]["train_limit"])
    tc = _train_config(config["master"], config["seed"])
    student, teacher = distill(
        build_master(), images, labels, tc,
        val_images=ds.val_images, val_labels=ds.val_labels,
        log=lambda e: print(f"  {e}", flush=True))
    save_checkpoint(student, out / "master.ckpt")
    save_checkpoint(teacher, out / "teacher.ckpt")
    _write_manifest(out, "train-master", config)
    acc = natural_accuracy(NetModel(student), ds.test_images, ds.test_labels)
    print(f"master checkpoint written; test accuracy {acc:.4f}")
    return 0


def cmd_gen_adv(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args, config)
    ds = _load_data(config)
    if args.split == "train":
        images, labels = _limited(ds.train_images, ds.train_labels,
                                  config["guardian"]["train_limit"])
    else:
        images, labels = ds.test_images, ds.test_labels
    if args.n is not None:
        images, labels = images[:args.n], labels[:args.n]

    master = NetModel(load_checkpoint(out / "master.ckpt", expected_spec=build_master()))
    attack = _attack_config(config, args.attack, targeted=False)
    cache_path = out / f"adv-{args.attack}-{args.split}.bin"
    meta_path = out / f"adv-{args.attack}-{args.split}.meta.csv"

    records, meta_rows = [], []
    if cache_path.exists():
        records, _ = read_adversarial_cache(cache_path)
        print(f"resuming: {len(records)} cached records")
    done = len(records)
    chunk = 256
    for start in range(done, len(images), chunk):
        stop = min(start + chunk, len(images))
        results = run_attack(master, images[start:stop], labels[start:stop], attack)
        for i, res in enumerate(results):
            records.append(CacheRecord(source_index=start + i, success=res.success,
                                       image=res.x_adv.reshape(-1)))
        write_adversarial_cache(cache_path, records)
        print(f"  {stop}/{len(images)} attacked", flush=True)
    for rec in records:
        meta_rows.append({"source_index": rec.source_index, "method": args.attack,
                          "targeted": False, "success": rec.success,
                          "l0": "", "l2": "", "linf": "", "iterations": ""})
    # distances recomputed from cache so resumed runs stay consistent
    for rec, row in zip(records, meta_rows):
        original = images[rec.source_index].reshape(-1)
        diff = rec.image - original
        row["l0"] = float((np.abs(diff) > 1e-6).sum())
        row["l2"] = float(np.sqrt((diff.astype(np.float64) ** 2).sum()))
        row["linf"] = float(np.abs(diff).max())
        row["iterations"] = ""
    write_cache_metadata(meta_path, meta_rows)
    _write_manifest(out, "gen-adv", config)
    rate = float(np.mean([r.success for r in records])) if records else 0.0
    print(f"{len(records)} adversarial records cached (attack success rate {rate:.3f})")
    return 0


def cmd_train_guardian(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args, config)
    _require_absent(out / "guardian.ckpt", args.force)
    ds = _load_data(config)
    naturals, _ = _limited(ds.train_images, ds.train_labels,
                           config["guardian"]["train_limit"])
    cache_path = out / f"adv-{args.attack}-train.bin"
    if not cache_path.exists():
        raise CacheFormatError(f"{cache_path} not found; run gen-adv first")
    records, _ = read_adversarial_cache(cache_path)
    n = min(len(records), len(naturals))
    adversarials = np.stack([r.image.reshape(naturals.shape[1:]) for r in records[:n]])
    success = np.array([r.success for r in records[:n]])
    images, labels = build_guardian_dataset(naturals[:n], adversarials, success)
    tc = _train_config(config["guardian"], config["seed"], temperature=1.0)
    guardian = train(build_guardian(), images, labels, tc,
                     log=lambda e: print(f"  {e}", flush=True))
    save_checkpoint(guardian, out / "guardian.ckpt")
    _write_manifest(out, "train-guardian", config)
    print("guardian checkpoint written")
    return 0


def _build_system(config, out: Path) -> ReabsNet:
    master = NetModel(load_checkpoint(out / "master.ckpt", expected_spec=build_master()))
    guardian = NetModel(load_checkpoint(out / "guardian.ckpt", expected_spec=build_guardian()))
    rev = config["revision"]
    return ReabsNet(master, guardian, revision_budget=rev["budget"],
                    revision_overshoot=rev["overshoot"], norm=rev["norm"])


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args, config)
    ds = _load_data(config)
    system = _build_system(config, out)

    rows_wanted = config["eval"]["rows"]
    if args.attack:
        rows_wanted = [r for r in rows_wanted if r["method"] == args.attack]
    eps_bounds = [args.eps_bound] if args.eps_bound is not None else config["eval"]["eps_bounds"]

    report = EvalReport(config_digest=config_digest(config))
    for name in ("master", "guardian"):
        report.checkpoint_digests[name] = load_checkpoint(out / f"{name}.ckpt").digest()

    all_traces = []
    t0 = time.monotonic()
    subset = select_subset(len(ds.test_images), min(config["eval"]["n"], len(ds.test_images)),
                           seed=config["seed"])
    naturals = ds.test_images[subset]
    natural_labels = ds.test_labels[subset]
    from .evaluation import detect_success_rate
    report.rows.append(EvalRow(
        method="non_attack", targeted=False, n=len(subset),
        detect_rate=detect_success_rate(system, naturals, "natural"),
        master_defense=natural_accuracy(system.master, naturals, natural_labels),
        reabsnet_defense=natural_accuracy(system, naturals, natural_labels),
        eps_bound=None, wall_seconds=time.monotonic() - t0,
    ))
    for want in rows_wanted:
        n = config["eval"]["n_linf"] if want["method"] == "cw_linf" else config["eval"]["n"]
        n = min(args.n or n, len(ds.test_images))
        idx = select_subset(len(ds.test_images), n, seed=config["seed"])
        attack = _attack_config(config, want["method"], want["targeted"])
        scored = evaluate_attack_bounds(system, attack, ds.test_images[idx],
                                        ds.test_labels[idx], ids=idx,
                                        eps_bounds=[None] + list(eps_bounds))
        for row, traces in scored:
            report.rows.append(row)
            all_traces.extend(traces)
            print(f"  {row.method} targeted={row.targeted} eps_bound={row.eps_bound}: "
                  f"detect={row.detect_rate} master={row.master_defense:.3f} "
                  f"reabsnet={row.reabsnet_defense:.3f} ({row.wall_seconds:.1f}s)", flush=True)

    emit_report(report, out / "report.csv", fmt="csv")
    emit_report(report, out / "report.json", fmt="json")
    write_trace_log(all_traces, out / "traces.jsonl")
    _write_manifest(out, "evaluate", config)
    print(f"report written to {out}")
    return 0


def cmd_classify(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ds = _load_data(config)
    system = _build_system(config, out)
    x = ds.test_images[args.index]
    outcome = system.classify(x)
    record = trace_record(args.index, outcome)
    record["true_label"] = int(ds.test_labels[args.index])
    print(json.dumps(record, indent=2, sort_keys=True))
    return 0


def _random_small_spec(rng) -> diffcore.NetworkSpec:
    size = int(rng.integers(6, 11))
    channels = int(rng.integers(2, 6))
    classes = int(rng.integers(3, 11))
    layers = [diffcore.LayerSpec("c1", "conv_relu", kernel=(3, 3), channels=channels)]
    if rng.random() < 0.5 and size >= 8:
        layers.append(diffcore.LayerSpec("p1", "maxpool"))
    layers.append(diffcore.LayerSpec("flat", "flatten"))
    if rng.random() < 0.5:
        layers.append(diffcore.LayerSpec("h1", "dense_relu", units=int(rng.integers(8, 25))))
    layers.append(diffcore.LayerSpec("out", "dense", units=classes))
    return diffcore.NetworkSpec(input_shape=(size, size, 1), layers=tuple(layers))


def cmd_verify_grad(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    failures = 0
    for i in range(args.networks):
        spec = _random_small_spec(rng)
        params = diffcore.init_param_set(spec, seed=int(rng.integers(1 << 31)))
        x = rng.uniform(-0.5, 0.5, size=spec.input_shape).astype(np.float32)
        report = diffcore.finite_diff_check(
            spec, params, x, tolerance=args.tolerance, samples=args.samples,
            seed=int(rng.integers(1 << 31)))
        status = "ok" if report.passed else "FAIL"
        print(f"  net {i:2d}: max_rel_error={report.max_rel_error:.3e} "
              f"checked={report.checked} skipped={report.skipped} [{status}]")
        worst = max(worst, report.max_rel_error)
        failures += 0 if report.passed else 1
    print(f"verify-grad: {args.networks - failures}/{args.networks} passed "
          f"(worst {worst:.3e}, tolerance {args.tolerance:.0e})")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reabsnet",
        description="Detect-and-revise adversarial defense pipeline",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run-config JSON path")
    common.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--workers", type=int, default=1,
                        help="cap on per-example parallelism (evaluation is vectorized; "
                             "results are index-ordered and deterministic for any value)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-master", parents=[common],
                       help="train the distilled master classifier")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.set_defaults(fn=cmd_train_master)

    p = sub.add_parser("gen-adv", parents=[common],
                       help="generate adversarial examples against the master")
    p.add_argument("--attack", default="deepfool",
                   choices=["fgsm", "deepfool", "cw_l2", "cw_linf"])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--n", type=int, default=None, help="limit the number of examples")
    p.set_defaults(fn=cmd_gen_adv)

    p = sub.add_parser("train-guardian", parents=[common],
                       help="train the adversarial-input detector")
    p.add_argument("--attack", default="deepfool", help="cache to train from")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.set_defaults(fn=cmd_train_guardian)

    p = sub.add_parser("evaluate", parents=[common], help="run attacks and emit the report")
    p.add_argument("--n", type=int, default=None, help="override per-attack sample count")
    p.add_argument("--eps-bound", type=float, default=None,
                   help="evaluate with an L-inf replacement budget")
    p.add_argument("--attack", default=None, help="restrict to one attack method")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("classify", parents=[common], help="classify one test image")
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("verify-grad", help="finite-difference check on random networks")
    p.add_argument("--networks", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("error: usage: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except RunConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 3
    except (IdxFormatError, CacheFormatError, CheckpointFormatError, FileNotFoundError) as err:
        print(f"error: data: {err}", file=sys.stderr)
        return 4
    except TrainingDivergedError as err:
        print(f"error: training: {err}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
