"""The composite defense: guardian gate, iterative image revision, master classify.

An input is first scored by the guardian.  Images the guardian passes go
straight to the master.  Detected adversarials are revised: a two-class
boundary-crossing walk (the same linearization step the DeepFool attack
uses, aimed at the guardian) perturbs the image until the guardian accepts
it or the step budget runs out; either way the master then classifies the
final image -- inputs are never rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import BOX, _deepfool_engine, lp_distance
from .data import ADVERSARIAL, NATURAL

DIRECT = "direct"
REVISED = "revised"

ACCEPTED = "accepted"
BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class Verdict:
    label: str  # "natural" | "adversarial"
    p_natural: float
    p_adversarial: float

    @property
    def is_adversarial(self) -> bool:
        return self.label == "adversarial"


def _verdict_from_probs(p_nat: float, p_adv: float) -> Verdict:
    return Verdict(
        label="adversarial" if p_adv > 0.5 else "natural",
        p_natural=p_nat,
        p_adversarial=p_adv,
    )


@dataclass
class RevisionTrace:
    x_input: np.ndarray
    x_revised: np.ndarray
    iterations: int
    distance: float  # revision distance under the configured norm
    outcome: str     # ACCEPTED | BUDGET_EXHAUSTED
    steps: list = field(default_factory=list)  # [(iterate, (p_nat, p_adv))] when collected


@dataclass
class ClassifyOutcome:
    label: int
    route: str  # DIRECT | REVISED
    verdict: Verdict
    trace: RevisionTrace | None = None


class ReabsNet:
    """Master + guardian + revision policy over frozen checkpoints."""

    def __init__(self, master, guardian, revision_budget: int = 50,
                 revision_overshoot: float = 0.02, norm: float = 2,
                 box: tuple[float, float] = BOX):
        self.master = master
        self.guardian = guardian
        self.revision_budget = revision_budget
        self.revision_overshoot = revision_overshoot
        self.norm = norm
        self.box = box

    def detect(self, x: np.ndarray) -> Verdict:
        """Adversarial iff p_adversarial > 0.5; an exact tie counts as natural."""
        p = self.guardian.probs(x)
        return _verdict_from_probs(float(p[NATURAL]), float(p[ADVERSARIAL]))

    def detect_batch(self, xb: np.ndarray) -> list[Verdict]:
        probs = self.guardian.probs(xb)
        return [_verdict_from_probs(float(p[NATURAL]), float(p[ADVERSARIAL])) for p in probs]

    def _revise_engine(self, xb: np.ndarray, collect: bool):
        escape_from = np.full(len(xb), ADVERSARIAL)
        return _deepfool_engine(
            self.guardian, xb, escape_from,
            max_iter=self.revision_budget, overshoot=self.revision_overshoot,
            box=self.box, collect=collect)

    def revise(self, x_adv: np.ndarray) -> RevisionTrace:
        """Walk a detected adversarial across the guardian's natural boundary.

        Precondition: the guardian currently flags `x_adv`.  Budget exhaustion
        is an outcome, not an error; the last iterate is still returned so the
        caller can classify it.
        """
        if not self.detect(x_adv).is_adversarial:
            raise ValueError("revise() requires an input the guardian flags as adversarial")
        revised, accepted, iterations, trails = self._revise_engine(x_adv[None], collect=True)
        steps = []
        for iterate in trails[0]:
            p = self.guardian.probs(iterate)
            steps.append((iterate, (float(p[NATURAL]), float(p[ADVERSARIAL]))))
        return RevisionTrace(
            x_input=x_adv,
            x_revised=revised[0],
            iterations=int(iterations[0]),
            distance=lp_distance(x_adv, revised[0], self.norm),
            outcome=ACCEPTED if accepted[0] else BUDGET_EXHAUSTED,
            steps=steps,
        )

    def classify(self, x: np.ndarray) -> ClassifyOutcome:
        verdict = self.detect(x)
        if not verdict.is_adversarial:
            return ClassifyOutcome(label=int(self.master.predict(x)),
                                   route=DIRECT, verdict=verdict)
        trace = self.revise(x)
        return ClassifyOutcome(label=int(self.master.predict(trace.x_revised)),
                               route=REVISED, verdict=verdict, trace=trace)

    def classify_batch(self, xb: np.ndarray) -> list[ClassifyOutcome]:
        """Batched classify; revision runs vectorized over the flagged subset.

        Per-step guardian scores are not collected here; use `classify` on a
        single image when the full revision trail is wanted.
        """
        verdicts = self.detect_batch(xb)
        flagged = np.array([v.is_adversarial for v in verdicts], dtype=bool)
        outcomes: list[ClassifyOutcome | None] = [None] * len(xb)

        direct_idx = np.flatnonzero(~flagged)
        if direct_idx.size:
            labels = self.master.predict(xb[direct_idx])
            for j, i in enumerate(direct_idx):
                outcomes[i] = ClassifyOutcome(label=int(labels[j]), route=DIRECT,
                                              verdict=verdicts[i])
        adv_idx = np.flatnonzero(flagged)
        if adv_idx.size:
            revised, accepted, iterations, _ = self._revise_engine(xb[adv_idx], collect=False)
            labels = self.master.predict(revised)
            for j, i in enumerate(adv_idx):
                trace = RevisionTrace(
                    x_input=xb[i],
                    x_revised=revised[j],
                    iterations=int(iterations[j]),
                    distance=lp_distance(xb[i], revised[j], self.norm),
                    outcome=ACCEPTED if accepted[j] else BUDGET_EXHAUSTED,
                )
                outcomes[i] = ClassifyOutcome(label=int(labels[j]), route=REVISED,
                                              verdict=verdicts[i], trace=trace)
        return outcomes


def trace_record(input_id, outcome: ClassifyOutcome) -> dict:
    """One exportable row per classified input (images omitted by design)."""
    return {
        "id": input_id,
        "route": outcome.route,
        "p_natural": outcome.verdict.p_natural,
        "p_adversarial": outcome.verdict.p_adversarial,
        "revision_iterations": outcome.trace.iterations if outcome.trace else 0,
        "revision_distance": outcome.trace.distance if outcome.trace else 0.0,
        "revision_outcome": outcome.trace.outcome if outcome.trace else None,
        "final_label": outcome.label,
    }


def write_trace_log(records: list[dict], path) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_trace_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
