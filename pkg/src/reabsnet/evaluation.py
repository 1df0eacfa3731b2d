"""Defense metrics: detection rates, defense success rates, bounded variants, reports.

Every rate is an aggregation over a per-example trace, and the trace rows are
exported alongside the report so each number can be recomputed from them.
Attack failures leave the original image in place (the defense trivially
succeeds on it) and are flagged `replaced` in the trace; the bounded variant
additionally replaces adversarials whose L-infinity distance exceeds the
configured budget.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, lp_distance, run_attack
from .pipeline import REVISED, ReabsNet

_CHUNK = 256  # attack/classify vectorization width; keeps buffers modest


@dataclass
class EvalRow:
    method: str
    targeted: bool
    n: int
    detect_rate: float | None
    master_defense: float
    reabsnet_defense: float
    eps_bound: float | None
    wall_seconds: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_digest: str = ""
    checkpoint_digests: dict = field(default_factory=dict)


def select_subset(total: int, n: int, seed: int) -> np.ndarray:
    """First n indices of a seeded shuffle; the fixed evaluation subset."""
    if n < 1:
        raise ValueError("subset size must be >= 1")
    return np.random.default_rng(seed).permutation(total)[:n]


def natural_accuracy(system, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of examples labeled correctly; accepts a bare model or the pipeline."""
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    hits = 0
    for start in range(0, len(images), _CHUNK):
        chunk = images[start:start + _CHUNK]
        truth = labels[start:start + _CHUNK]
        if isinstance(system, ReabsNet):
            got = np.array([o.label for o in system.classify_batch(chunk)])
        else:
            got = np.asarray(system.predict(chunk))
        hits += int((got == truth).sum())
    return hits / len(images)


def detect_success_rate(system: ReabsNet, images: np.ndarray, expect: str) -> float:
    """Fraction of `images` the guardian calls `expect` ("natural"/"adversarial")."""
    if expect not in ("natural", "adversarial"):
        raise ValueError(f"expect must be 'natural' or 'adversarial', got {expect!r}")
    if len(images) == 0:
        raise ValueError("empty detection set")
    hits = 0
    for start in range(0, len(images), _CHUNK):
        verdicts = system.detect_batch(images[start:start + _CHUNK])
        hits += sum(1 for v in verdicts if v.label == expect)
    return hits / len(images)


def evaluate_attack_bounds(
    system: ReabsNet,
    config: AttackConfig,
    images: np.ndarray,
    labels: np.ndarray,
    ids: np.ndarray | None = None,
    eps_bounds: list | None = None,
) -> list[tuple[EvalRow, list[dict]]]:
    """Attack the master once, then score both defenses under each L-inf budget.

    `eps_bounds` entries may be None (no replacement).  Returns one
    (aggregate row, per-example traces) pair per bound; traces carry enough to
    recompute every rate and the distance bookkeeping of revised images.
    """
    start_time = time.monotonic()
    labels = np.asarray(labels)
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    k = system.master.num_classes
    targets = (labels + 1) % k if config.targeted else None
    eps_bounds = [None] if eps_bounds is None else list(eps_bounds)

    results = []
    for start in range(0, len(images), _CHUNK):
        chunk_targets = None if targets is None else targets[start:start + _CHUNK]
        results.extend(run_attack(system.master, images[start:start + _CHUNK],
                                  labels[start:start + _CHUNK], config,
                                  target=chunk_targets))
    attack_seconds = time.monotonic() - start_time

    # detection is scored over successfully generated adversarials only,
    # independent of any replacement budget
    adv_idx = [i for i, res in enumerate(results) if res.success]
    detect_rate = None
    if adv_idx:
        adv_images = np.stack([results[i].x_adv for i in adv_idx])
        detect_rate = detect_success_rate(system, adv_images, "adversarial")

    scored = []
    for eps_bound in eps_bounds:
        bound_start = time.monotonic()
        evaluated = np.empty_like(images)
        replaced = np.zeros(len(images), dtype=bool)
        for i, res in enumerate(results):
            out_of_budget = eps_bound is not None and res.linf > eps_bound
            if res.success and not out_of_budget:
                evaluated[i] = res.x_adv
            else:
                evaluated[i] = images[i]  # failed or over-budget attacks revert
                replaced[i] = True

        master_labels = []
        outcomes = []
        for start in range(0, len(images), _CHUNK):
            chunk = evaluated[start:start + _CHUNK]
            master_labels.extend(np.asarray(system.master.predict(chunk)).tolist())
            outcomes.extend(system.classify_batch(chunk))

        traces = []
        for i, res in enumerate(results):
            outcome = outcomes[i]
            row = {
                "id": int(ids[i]),
                "method": config.method,
                "targeted": config.targeted,
                "true_label": int(labels[i]),
                "attack_success": bool(res.success),
                "attack_iterations": int(res.iterations),
                "l0": res.l0,
                "l2": res.l2,
                "linf": res.linf,
                "eps_bound": eps_bound,
                "replaced": bool(replaced[i]),
                "route": outcome.route,
                "p_natural": outcome.verdict.p_natural,
                "p_adversarial": outcome.verdict.p_adversarial,
                "master_label": int(master_labels[i]),
                "final_label": int(outcome.label),
                "master_defended": bool(master_labels[i] == labels[i]),
                "reabsnet_defended": bool(outcome.label == labels[i]),
            }
            if outcome.route == REVISED:
                trace = outcome.trace
                row["revision_outcome"] = trace.outcome
                row["revision_iterations"] = trace.iterations
                row["revision_distance"] = trace.distance
                row["total_distance"] = lp_distance(images[i], trace.x_revised, system.norm)
                row["attack_distance"] = lp_distance(images[i], evaluated[i], system.norm)
            traces.append(row)

        scored.append((EvalRow(
            method=config.method,
            targeted=config.targeted,
            n=len(images),
            detect_rate=detect_rate,
            master_defense=float(np.mean([t["master_defended"] for t in traces])),
            reabsnet_defense=float(np.mean([t["reabsnet_defended"] for t in traces])),
            eps_bound=eps_bound,
            wall_seconds=attack_seconds + time.monotonic() - bound_start,
        ), traces))
    return scored


def evaluate_attack(
    system: ReabsNet,
    config: AttackConfig,
    images: np.ndarray,
    labels: np.ndarray,
    ids: np.ndarray | None = None,
    eps_bound: float | None = None,
) -> tuple[EvalRow, list[dict]]:
    """Single-budget convenience over evaluate_attack_bounds."""
    return evaluate_attack_bounds(system, config, images, labels, ids=ids,
                                  eps_bounds=[eps_bound])[0]


def defense_success_rate(system: ReabsNet, config: AttackConfig, images: np.ndarray,
                         labels: np.ndarray, which: str = "reabsnet") -> float:
    """Defense success of `which` ("master_only"/"reabsnet") under one attack."""
    row, _ = evaluate_attack(system, config, images, labels)
    return row.master_defense if which == "master_only" else row.reabsnet_defense


def bounded_defense_rate(system: ReabsNet, config: AttackConfig, images: np.ndarray,
                         labels: np.ndarray, eps_bound: float,
                         which: str = "reabsnet") -> float:
    """As defense_success_rate, but adversarials beyond the L-inf budget revert."""
    if eps_bound <= 0:
        raise ValueError("eps_bound must be positive")
    row, _ = evaluate_attack(system, config, images, labels, eps_bound=eps_bound)
    return row.master_defense if which == "master_only" else row.reabsnet_defense


def rates_from_traces(traces: list[dict]) -> tuple[float, float]:
    """(master defense, pipeline defense) recomputed from exported trace rows."""
    master = float(np.mean([t["master_defended"] for t in traces]))
    reabsnet = float(np.mean([t["reabsnet_defended"] for t in traces]))
    return master, reabsnet


def emit_report(report: EvalReport, path, fmt: str = "csv") -> None:
    """Deterministic serialization; JSON additionally carries the digests."""
    if fmt == "csv":
        fields = ["method", "targeted", "n", "detect_rate", "master_defense",
                  "reabsnet_defense", "eps_bound", "wall_seconds"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(fields)
            for row in report.rows:
                d = asdict(row)
                writer.writerow(["" if d[k] is None else repr(d[k]) if isinstance(d[k], float)
                                 else d[k] for k in fields])
    elif fmt == "json":
        body = {
            "config_digest": report.config_digest,
            "checkpoint_digests": report.checkpoint_digests,
            "rows": [asdict(row) for row in report.rows],
        }
        with open(path, "w") as f:
            json.dump(body, f, indent=2, sort_keys=True)
            f.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = []
        for raw in csv.DictReader(f):
            row = dict(raw)
            for key in ("detect_rate", "master_defense", "reabsnet_defense",
                        "eps_bound", "wall_seconds"):
                row[key] = float(row[key]) if row[key] != "" else None
            row["n"] = int(row["n"])
            row["targeted"] = row["targeted"] == "True"
            rows.append(row)
        return rows
