"""Gradient-based adversarial example generation.

Four attacks against any checkpointed classifier exposing logits and input
gradients:

* fgsm      -- single signed-gradient step on the cross-entropy loss
* deepfool  -- iterative multiclass linearization, minimal L2 projection per
               step, accumulated perturbation overshot by (1 + eta)
* cw_l2     -- tanh-reparameterized penalty optimization of a logit margin,
               binary search over the tradeoff constant, best-distance result
* cw_linf   -- penalty optimization with a shrinking per-pixel threshold tau;
               tau decays by 0.9 while every perturbation component stays
               below it, otherwise the search stops

All attacks are deterministic, keep iterates inside the pixel box, and verify
the reported success flag by re-running the model on the final image.  The
engines are batched; the single-example entry points delegate to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore

BOX = (-0.5, 0.5)

_DEEPFOOL_ITERS = 50
_CW_ITERS = 200


@dataclass(frozen=True)
class AttackConfig:
    method: str
    targeted: bool = False
    epsilon: float = 0.25            # fgsm step size
    max_iter: int | None = None      # deepfool outer steps / cw inner steps
    overshoot: float = 0.02          # deepfool
    kappa: float = 0.0               # cw confidence margin
    initial_c: float = 1.0           # cw_l2 binary search start
    c_lo: float = 1e-3               # cw_l2 binary search bounds
    c_hi: float = 1e3
    search_steps: int = 6            # cw_l2 binary search steps
    c: float = 5.0                   # cw_linf fixed tradeoff
    tau0: float = 1.0                # cw_linf initial threshold
    shrink: float = 0.9              # cw_linf tau decay
    max_outer: int = 25              # cw_linf outer iterations
    learning_rate: float = 0.01      # cw inner optimizer step

    def __post_init__(self):
        if self.method not in ("fgsm", "deepfool", "cw_l2", "cw_linf"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.c <= 0 or self.initial_c <= 0:
            raise ValueError("tradeoff constants must be positive")
        if not (0 < self.shrink < 1):
            raise ValueError("shrink factor must be in (0, 1)")
        if not (0 < self.tau0 <= 1):
            raise ValueError("tau0 must be in (0, 1]")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    def resolved_max_iter(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return _DEEPFOOL_ITERS if self.method == "deepfool" else _CW_ITERS


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    iterations: int
    l0: float
    l2: float
    linf: float
    adv_label: int


def clip_valid(x: np.ndarray, box: tuple[float, float] = BOX) -> np.ndarray:
    """Componentwise clamp into the valid pixel range."""
    return np.clip(x, box[0], box[1])


def lp_distance(x: np.ndarray, x_other: np.ndarray, p) -> float:
    """L0 (pixels differing beyond 1e-6), L2, or L-infinity distance."""
    x = np.asarray(x)
    x_other = np.asarray(x_other)
    if x.shape != x_other.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_other.shape}")
    diff = (x_other - x).astype(np.float64).reshape(-1)
    if p == 0:
        return float((np.abs(diff) > 1e-6).sum())
    if p == 2:
        return float(np.sqrt((diff ** 2).sum()))
    if p == math.inf or p == np.inf:
        return float(np.abs(diff).max()) if diff.size else 0.0
    raise ValueError(f"unsupported norm p={p}")


def _result(x0: np.ndarray, x_adv: np.ndarray, success: bool, iterations: int,
            adv_label: int) -> AttackResult:
    return AttackResult(
        x_adv=x_adv,
        success=bool(success),
        iterations=int(iterations),
        l0=lp_distance(x0, x_adv, 0),
        l2=lp_distance(x0, x_adv, 2),
        linf=lp_distance(x0, x_adv, math.inf),
        adv_label=int(adv_label),
    )


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------

def fgsm_batch(model, xb: np.ndarray, yb: np.ndarray, epsilon: float,
               box: tuple[float, float] = BOX) -> list[AttackResult]:
    yb = np.asarray(yb)
    targets = np.zeros((len(xb), model.num_classes), dtype=xb.dtype)
    targets[np.arange(len(xb)), yb] = 1.0
    _, grad = model.loss_grad(xb, targets, temperature=1.0)
    x_adv = clip_valid(xb + epsilon * np.sign(grad), box)
    labels = model.predict(x_adv)
    return [
        _result(xb[i], x_adv[i], labels[i] != yb[i], 1, labels[i])
        for i in range(len(xb))
    ]


def fgsm(model, x: np.ndarray, y: int, epsilon: float,
         box: tuple[float, float] = BOX) -> AttackResult:
    """x_adv = clip(x + epsilon * sign(d loss / dx)) for true label y."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return fgsm_batch(model, x[None], np.array([y]), epsilon, box)[0]


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------

def _deepfool_engine(model, x0b: np.ndarray, y0: np.ndarray, max_iter: int,
                     overshoot: float, box: tuple[float, float],
                     collect: bool = False):
    """Shared multiclass-linearization loop.

    Walks every example away from its class y0 until the model's label
    changes or `max_iter` steps pass.  Returns (x_adv, escaped, iterations,
    iterate_trails); trails hold each example's successive clipped iterates
    when `collect` is set.
    """
    bsz = len(x0b)
    flat = int(np.prod(x0b.shape[1:]))
    r_tot = np.zeros_like(x0b)
    iterations = np.zeros(bsz, dtype=int)
    trails = [[] for _ in range(bsz)] if collect else None

    x_adv = clip_valid(x0b, box).astype(x0b.dtype)
    pred = np.asarray(model.predict(x_adv))
    active = pred == y0

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        x_cur = x_adv[idx]
        logits, grads = model.logits_and_class_grads(x_cur)
        k0 = y0[idx]
        rows = np.arange(len(idx))

        gaps = logits - logits[rows, k0][:, None]                     # (b, K)
        w = grads.transpose(1, 0, *range(2, grads.ndim)).reshape(len(idx), -1, flat)
        w = w - w[rows, k0][:, None, :]                               # (b, K, flat)
        norms = np.sqrt((w ** 2).sum(axis=2))
        scores = np.abs(gaps) / np.maximum(norms, 1e-12)
        scores[rows, k0] = np.inf
        best = scores.argmin(axis=1)

        # piecewise-linear networks make the linearization exact, so a step can
        # land on the boundary with a gap of exactly 0 and stall on the argmax
        # tie; a few ULPs of the logit scale guarantee progress without
        # disturbing the closed-form geometry
        nudge = 4 * np.spacing(np.abs(logits).max(axis=1))
        step = ((np.abs(gaps[rows, best]) + nudge)
                / np.maximum(norms[rows, best] ** 2, 1e-12))
        r = (step[:, None] * w[rows, best]).reshape((len(idx),) + x0b.shape[1:])
        r_tot[idx] += r
        iterations[idx] += 1

        new_iterate = clip_valid(x0b[idx] + (1.0 + overshoot) * r_tot[idx], box)
        x_adv[idx] = new_iterate
        if collect:
            for j, example in enumerate(idx):
                trails[example].append(new_iterate[j].copy())

        pred_new = np.asarray(model.predict(new_iterate))
        active[idx] = pred_new == k0

    escaped = np.asarray(model.predict(x_adv)) != y0
    return x_adv, escaped, iterations, trails


def deepfool_batch(model, xb: np.ndarray, yb: np.ndarray | None = None,
                   max_iter: int = _DEEPFOOL_ITERS, overshoot: float = 0.02,
                   box: tuple[float, float] = BOX) -> list[AttackResult]:
    if yb is None:
        yb = np.asarray(model.predict(xb))
    else:
        yb = np.asarray(yb)
    x_adv, escaped, iterations, _ = _deepfool_engine(
        model, xb, yb, max_iter=max_iter, overshoot=overshoot, box=box)
    labels = np.asarray(model.predict(x_adv))
    return [
        _result(xb[i], x_adv[i], escaped[i], iterations[i], labels[i])
        for i in range(len(xb))
    ]


def deepfool(model, x: np.ndarray, y: int | None = None,
             max_iter: int = _DEEPFOOL_ITERS, overshoot: float = 0.02,
             box: tuple[float, float] = BOX) -> AttackResult:
    """Minimal-perturbation boundary crossing away from label y.

    When y is omitted the model's own prediction at x is used.  An input the
    model already labels differently from y returns immediately (0 steps).
    """
    yb = None if y is None else np.array([y])
    return deepfool_batch(model, x[None], yb, max_iter=max_iter,
                          overshoot=overshoot, box=box)[0]


# ---------------------------------------------------------------------------
# Carlini-Wagner margin machinery shared by the L2 and Linf attacks
# ---------------------------------------------------------------------------

def _margin_and_grad(model, x_adv: np.ndarray, y: np.ndarray | None,
                     target: np.ndarray | None, kappa: float):
    """Hinged logit margin f and its input gradient, one forward + one backward.

    Targeted (target t given):  f = max(max_{i != t} z_i - z_t, -kappa)
    Untargeted (true label y):  f = max(z_y - max_{i != y} z_i, -kappa)
    f <= -kappa means the attack constraint is satisfied with confidence kappa.
    """
    logits, tape = model.record(x_adv)
    rows = np.arange(len(x_adv))
    masked = logits.copy()
    if target is not None:
        masked[rows, target] = -np.inf
        runner = masked.argmax(axis=1)
        raw = logits[rows, runner] - logits[rows, target]
        plus, minus = runner, target
    else:
        masked[rows, y] = -np.inf
        runner = masked.argmax(axis=1)
        raw = logits[rows, y] - logits[rows, runner]
        plus, minus = y, runner
    hinge_active = raw > -kappa
    weights = np.zeros_like(logits)
    weights[rows, plus] += hinge_active
    weights[rows, minus] -= hinge_active
    head = diffcore.attach_weighted_logits(tape, weights)
    _, grad = diffcore.backward(tape, head=head)
    return logits, np.maximum(raw, -kappa), grad


def _attack_goal_met(labels: np.ndarray, y: np.ndarray | None,
                     target: np.ndarray | None) -> np.ndarray:
    if target is not None:
        return labels == target
    return labels != y


# ---------------------------------------------------------------------------
# CW L2
# ---------------------------------------------------------------------------

def cw_l2_batch(model, xb: np.ndarray, yb: np.ndarray,
                target: np.ndarray | None = None, kappa: float = 0.0,
                initial_c: float = 1.0, c_lo: float = 1e-3, c_hi: float = 1e3,
                search_steps: int = 6, max_iter: int = _CW_ITERS,
                learning_rate: float = 0.01,
                box: tuple[float, float] = BOX) -> list[AttackResult]:
    yb = np.asarray(yb)
    if target is not None:
        target = np.asarray(target)
    lo, hi = box
    scale = hi - lo
    bsz = len(xb)
    inset = 1e-6
    unit = np.clip((xb - lo) / scale, inset, 1 - inset)
    v0 = np.arctanh(2 * unit - 1).astype(xb.dtype)

    c = np.full(bsz, initial_c, dtype=np.float64)
    c_low = np.full(bsz, c_lo, dtype=np.float64)
    c_high = np.full(bsz, c_hi, dtype=np.float64)

    best_adv = xb.copy()
    best_l2 = np.full(bsz, np.inf)
    best_label = np.asarray(model.predict(xb))
    ever_success = np.zeros(bsz, dtype=bool)
    total_iters = 0

    axes = tuple(range(1, xb.ndim))
    for _ in range(search_steps):
        v = v0.copy()
        success_phase = np.zeros(bsz, dtype=bool)
        c32 = c.astype(xb.dtype).reshape((bsz,) + (1,) * (xb.ndim - 1))
        for _ in range(max_iter):
            total_iters += 1
            tanh_v = np.tanh(v)
            x_adv = lo + scale * (tanh_v + 1) / 2
            logits, f, grad_f = _margin_and_grad(model, x_adv, yb, target, kappa)
            labels = logits.argmax(axis=1)
            good = _attack_goal_met(labels, yb, target)
            if good.any():
                l2 = np.sqrt(((x_adv - xb) ** 2).sum(axis=axes))
                improved = good & (l2 < best_l2)
                best_l2[improved] = l2[improved]
                best_adv[improved] = x_adv[improved]
                best_label[improved] = labels[improved]
                success_phase |= good
            d_obj = 2 * (x_adv - xb) + c32 * grad_f
            v -= learning_rate * d_obj * (scale / 2) * (1 - tanh_v ** 2)
        ever_success |= success_phase
        c_high = np.where(success_phase, np.minimum(c_high, c), c_high)
        c_low = np.where(success_phase, c_low, np.maximum(c_low, c))
        c = (c_low + c_high) / 2

    return [
        _result(xb[i], best_adv[i], ever_success[i], total_iters, best_label[i])
        for i in range(bsz)
    ]


def cw_l2(model, x: np.ndarray, y: int, target: int | None = None,
          kappa: float = 0.0, initial_c: float = 1.0, c_lo: float = 1e-3,
          c_hi: float = 1e3, search_steps: int = 6, max_iter: int = _CW_ITERS,
          learning_rate: float = 0.01, box: tuple[float, float] = BOX) -> AttackResult:
    """Minimal-L2 margin attack; returns the closest successful iterate found."""
    if target is not None and target == y:
        raise ValueError("targeted attack requires target != true label")
    tb = None if target is None else np.array([target])
    return cw_l2_batch(model, x[None], np.array([y]), tb, kappa=kappa,
                       initial_c=initial_c, c_lo=c_lo, c_hi=c_hi,
                       search_steps=search_steps, max_iter=max_iter,
                       learning_rate=learning_rate, box=box)[0]


# ---------------------------------------------------------------------------
# CW Linf
# ---------------------------------------------------------------------------

def cw_linf_batch(model, xb: np.ndarray, yb: np.ndarray,
                  target: np.ndarray | None = None, kappa: float = 0.0,
                  c: float = 5.0, tau0: float = 1.0, shrink: float = 0.9,
                  max_outer: int = 25, max_iter: int = _CW_ITERS,
                  learning_rate: float = 0.01,
                  box: tuple[float, float] = BOX) -> list[AttackResult]:
    yb = np.asarray(yb)
    if target is not None:
        target = np.asarray(target)
    bsz = len(xb)
    axes = tuple(range(1, xb.ndim))
    tau_shape = (bsz,) + (1,) * (xb.ndim - 1)

    delta = np.zeros_like(xb)
    tau = np.full(bsz, tau0, dtype=np.float64)
    searching = np.ones(bsz, dtype=bool)
    best_adv = xb.copy()
    best_linf = np.full(bsz, np.inf)
    best_label = np.asarray(model.predict(xb))
    ever_success = np.zeros(bsz, dtype=bool)
    outer_used = np.zeros(bsz, dtype=int)

    for _ in range(max_outer):
        if not searching.any():
            break
        idx = np.flatnonzero(searching)
        tau32 = tau[idx].astype(xb.dtype).reshape((len(idx),) + tau_shape[1:])
        d = delta[idx]
        x0 = xb[idx]
        for _ in range(max_iter):
            x_adv = clip_valid(x0 + d, box)
            d = x_adv - x0
            logits, f, grad_f = _margin_and_grad(
                model, x_adv, yb[idx], None if target is None else target[idx], kappa)
            labels = logits.argmax(axis=1)
            good = _attack_goal_met(labels, yb[idx], None if target is None else target[idx])
            if good.any():
                linf = np.abs(d).reshape(len(idx), -1).max(axis=1)
                sub = np.flatnonzero(good)
                for j in sub:
                    g = idx[j]
                    ever_success[g] = True
                    if linf[j] < best_linf[g]:
                        best_linf[g] = linf[j]
                        best_adv[g] = x_adv[j]
                        best_label[g] = labels[j]
            penalty_grad = (d > tau32).astype(xb.dtype)
            d = d - learning_rate * (c * grad_f + penalty_grad)
            d = clip_valid(x0 + d, box) - x0
        delta[idx] = d
        outer_used[idx] += 1
        within = (d < tau32).reshape(len(idx), -1).all(axis=1)
        tau[idx[within]] *= shrink
        searching[idx[~within]] = False

    return [
        _result(xb[i], best_adv[i], ever_success[i], outer_used[i], best_label[i])
        for i in range(bsz)
    ]


def cw_linf(model, x: np.ndarray, y: int, target: int | None = None,
            kappa: float = 0.0, c: float = 5.0, tau0: float = 1.0,
            shrink: float = 0.9, max_outer: int = 25, max_iter: int = _CW_ITERS,
            learning_rate: float = 0.01, box: tuple[float, float] = BOX) -> AttackResult:
    """Threshold-penalty attack; tau decays by `shrink` until a component resists."""
    if not (0 < tau0 <= 1):
        raise ValueError("tau0 must be in (0, 1]")
    if target is not None and target == y:
        raise ValueError("targeted attack requires target != true label")
    tb = None if target is None else np.array([target])
    return cw_linf_batch(model, x[None], np.array([y]), tb, kappa=kappa, c=c,
                         tau0=tau0, shrink=shrink, max_outer=max_outer,
                         max_iter=max_iter, learning_rate=learning_rate, box=box)[0]


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def run_attack(model, xb: np.ndarray, yb: np.ndarray, config: AttackConfig,
               target: np.ndarray | None = None,
               box: tuple[float, float] = BOX) -> list[AttackResult]:
    """Run the configured attack over a batch; targeted modes need `target`."""
    if config.targeted and target is None:
        raise ValueError(f"{config.method}: targeted mode requires target labels")
    if config.method == "fgsm":
        return fgsm_batch(model, xb, yb, epsilon=config.epsilon, box=box)
    if config.method == "deepfool":
        return deepfool_batch(model, xb, yb, max_iter=config.resolved_max_iter(),
                              overshoot=config.overshoot, box=box)
    if config.method == "cw_l2":
        return cw_l2_batch(model, xb, yb, target=target if config.targeted else None,
                           kappa=config.kappa, initial_c=config.initial_c,
                           c_lo=config.c_lo, c_hi=config.c_hi,
                           search_steps=config.search_steps,
                           max_iter=config.resolved_max_iter(),
                           learning_rate=config.learning_rate, box=box)
    if config.method == "cw_linf":
        return cw_linf_batch(model, xb, yb, target=target if config.targeted else None,
                             kappa=config.kappa, c=config.c, tau0=config.tau0,
                             shrink=config.shrink, max_outer=config.max_outer,
                             max_iter=config.resolved_max_iter(),
                             learning_rate=config.learning_rate, box=box)
    raise ValueError(f"unknown attack method {config.method!r}")
