"""Reverse-mode differentiation core for small convolutional classifiers.

Networks are described by a `NetworkSpec` (an ordered layer manifest), run by
`forward`, and differentiated by recording primitive applications on a `Tape`
and walking it backwards.  The primitive set is exactly what the two networks
in this package need: valid-padding convolution, 2x2 max-pooling, dense
layers, ReLU, flatten, concatenate, temperature softmax and cross-entropy.

Arrays are plain numpy ndarrays, channels-last.  Training and attack loops
run in float32; the finite-difference validator runs in float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import NetworkConfigError, TapeUsageError

LOG_FLOOR = 1e-12

LAYER_KINDS = ("conv_relu", "maxpool", "flatten", "dense", "dense_relu", "concat")

# Parameter container: layer name -> (weights, bias), in manifest order.
ParamSet = dict[str, tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# Network specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One entry of a layer manifest.

    `inputs` names the upstream layers feeding this one ("input" refers to the
    network input); when None, the layer consumes the previous manifest entry.
    """

    name: str
    kind: str
    kernel: tuple[int, int] | None = None   # conv_relu
    channels: int | None = None             # conv_relu
    units: int | None = None                # dense / dense_relu
    inputs: tuple[str, ...] | None = None


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer manifest plus the input shape it accepts."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise NetworkConfigError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.name in seen or layer.name == "input":
                raise NetworkConfigError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
        self.layer_shapes()  # composition check at construction time

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Shape of each layer's output (without the batch axis)."""
        shapes: dict[str, tuple[int, ...]] = {"input": tuple(self.input_shape)}
        prev = "input"
        for layer in self.layers:
            feeds = layer.inputs if layer.inputs is not None else (prev,)
            for name in feeds:
                if name not in shapes:
                    raise NetworkConfigError(
                        f"layer {layer.name!r}: input {name!r} is not an earlier layer")
            shapes[layer.name] = _infer_shape(layer, [shapes[n] for n in feeds])
            prev = layer.name
        return shapes

    @property
    def output_width(self) -> int:
        shape = self.layer_shapes()[self.layers[-1].name]
        if len(shape) != 1:
            raise NetworkConfigError("final layer must produce a flat logits vector")
        return shape[0]

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """Weight/bias shapes for every parameterized layer, in manifest order."""
        shapes = self.layer_shapes()
        out: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        prev = "input"
        for layer in self.layers:
            feeds = layer.inputs if layer.inputs is not None else (prev,)
            in_shape = shapes[feeds[0]]
            if layer.kind == "conv_relu":
                kh, kw = layer.kernel
                out[layer.name] = ((kh, kw, in_shape[2], layer.channels), (layer.channels,))
            elif layer.kind in ("dense", "dense_relu"):
                out[layer.name] = ((in_shape[0], layer.units), (layer.units,))
            prev = layer.name
        return out

    def num_params(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in self.param_shapes().values())

    def to_json(self) -> str:
        body = {
            "input_shape": list(self.input_shape),
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in (("name", l.name), ("kind", l.kind), ("kernel", l.kernel),
                              ("channels", l.channels), ("units", l.units), ("inputs", l.inputs))
                 if v is not None}
                for l in self.layers
            ],
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        body = json.loads(text)
        layers = tuple(
            LayerSpec(
                name=entry["name"],
                kind=entry["kind"],
                kernel=tuple(entry["kernel"]) if "kernel" in entry else None,
                channels=entry.get("channels"),
                units=entry.get("units"),
                inputs=tuple(entry["inputs"]) if "inputs" in entry else None,
            )
            for entry in body["layers"]
        )
        return NetworkSpec(input_shape=tuple(body["input_shape"]), layers=layers)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


def _infer_shape(layer: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    name = layer.name
    if layer.kind == "concat":
        if len(in_shapes) < 2:
            raise NetworkConfigError(f"layer {name!r}: concat needs at least two inputs")
        if any(len(s) != 1 for s in in_shapes):
            raise NetworkConfigError(f"layer {name!r}: concat inputs must be flat vectors")
        return (sum(s[0] for s in in_shapes),)
    if len(in_shapes) != 1:
        raise NetworkConfigError(f"layer {name!r}: expects exactly one input")
    shape = in_shapes[0]
    if layer.kind == "conv_relu":
        if len(shape) != 3:
            raise NetworkConfigError(f"layer {name!r}: convolution needs an HxWxC input")
        if layer.kernel is None or layer.channels is None:
            raise NetworkConfigError(f"layer {name!r}: convolution needs kernel and channels")
        kh, kw = layer.kernel
        ho, wo = shape[0] - kh + 1, shape[1] - kw + 1
        if ho < 1 or wo < 1:
            raise NetworkConfigError(f"layer {name!r}: kernel {kh}x{kw} larger than input {shape}")
        return (ho, wo, layer.channels)
    if layer.kind == "maxpool":
        if len(shape) != 3:
            raise NetworkConfigError(f"layer {name!r}: max-pool needs an HxWxC input")
        if shape[0] < 2 or shape[1] < 2:
            raise NetworkConfigError(f"layer {name!r}: input {shape} too small to pool")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind in ("dense", "dense_relu"):
        if len(shape) != 1:
            raise NetworkConfigError(f"layer {name!r}: dense needs a flat input (flatten first)")
        if layer.units is None:
            raise NetworkConfigError(f"layer {name!r}: dense needs units")
        return (layer.units,)
    raise NetworkConfigError(f"layer {name!r}: unknown kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeRecord:
    op: str
    in_ids: tuple[int, ...]
    out_id: int
    ctx: dict


@dataclass
class Tape:
    """Topologically ordered record of primitive applications.

    Leaf nodes (the input and each parameter array) are materialized before
    any record; every record's inputs therefore precede it.  A scalar head
    must be attached (see `attach_cross_entropy` / `attach_weighted_logits`)
    before `backward` can run.
    """

    values: list = field(default_factory=list)
    records: list = field(default_factory=list)
    input_id: int = -1
    param_ids: dict = field(default_factory=dict)
    logits_id: int = -1
    scalar_id: Optional[int] = None

    def new_node(self, value: np.ndarray) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def apply(self, op: str, in_ids: tuple[int, ...], ctx: dict | None = None) -> int:
        ctx = {} if ctx is None else ctx
        vals = [self.values[i] for i in in_ids]
        out = _OPS[op].forward(vals, ctx)
        out_id = self.new_node(out)
        self.records.append(TapeRecord(op, in_ids, out_id, ctx))
        return out_id

    def replay(self) -> np.ndarray:
        """Recompute every recorded node from the stored leaves; returns logits."""
        values = list(self.values)
        for rec in self.records:
            values[rec.out_id] = _OPS[rec.op].forward([values[i] for i in rec.in_ids], dict(rec.ctx))
        return values[self.logits_id]


class _Op:
    __slots__ = ("forward", "backward")

    def __init__(self, forward, backward):
        self.forward = forward
        self.backward = backward


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B,H,W,C) -> (B,Ho,Wo,kh*kw*C); row-major patch layout matches kernel.reshape(-1, Cout)
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    b, ho, wo, c = view.shape[0], view.shape[1], view.shape[2], view.shape[3]
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, kh * kw * c)


def _conv2d_fwd(vals, ctx):
    x, w, b = vals
    kh, kw, cin, cout = w.shape
    col = _im2col(x, kh, kw)
    out = col @ w.reshape(kh * kw * cin, cout)
    out += b
    return out


def _conv2d_bwd(dout, vals, out, ctx):
    x, w, b = vals
    kh, kw, cin, cout = w.shape
    bsz, ho, wo, _ = dout.shape
    col = _im2col(x, kh, kw).reshape(-1, kh * kw * cin)
    dflat = dout.reshape(-1, cout)
    dw = (col.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcol = (dflat @ w.reshape(kh * kw * cin, cout).T).reshape(bsz, ho, wo, kh, kw, cin)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho, j:j + wo, :] += dcol[:, :, :, i, j, :]
    return dx, dw, db


def _relu_fwd(vals, ctx):
    return np.maximum(vals[0], 0)


def _relu_bwd(dout, vals, out, ctx):
    return (dout * (vals[0] > 0),)


def _maxpool_fwd(vals, ctx):
    x = vals[0]
    b, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(b, ho, 2, wo, 2, c)
    win = np.ascontiguousarray(win.transpose(0, 1, 3, 5, 2, 4)).reshape(b, ho, wo, c, 4)
    idx = win.argmax(axis=-1)  # argmax keeps the first maximum: row-major tie-break
    ctx["idx"] = idx.astype(np.int8)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def _maxpool_bwd(dout, vals, out, ctx):
    x = vals[0]
    b, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    scat = np.zeros((b, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(scat, ctx["idx"].astype(np.int64)[..., None], dout[..., None], axis=-1)
    dx = np.zeros_like(x)
    dx[:, :2 * ho, :2 * wo, :] = (
        scat.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * ho, 2 * wo, c)
    )
    return (dx,)


def _flatten_fwd(vals, ctx):
    x = vals[0]
    ctx["in_shape"] = x.shape
    return x.reshape(x.shape[0], -1)


def _flatten_bwd(dout, vals, out, ctx):
    return (dout.reshape(ctx["in_shape"]),)


def _dense_fwd(vals, ctx):
    x, w, b = vals
    return x @ w + b


def _dense_bwd(dout, vals, out, ctx):
    x, w, b = vals
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def _concat_fwd(vals, ctx):
    ctx["widths"] = [v.shape[1] for v in vals]
    return np.concatenate(vals, axis=1)


def _concat_bwd(dout, vals, out, ctx):
    grads = []
    offset = 0
    for width in ctx["widths"]:
        grads.append(dout[:, offset:offset + width])
        offset += width
    return tuple(grads)


def _softmax_fwd(vals, ctx):
    z = vals[0] / ctx["temperature"]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(dout, vals, out, ctx):
    inner = (dout * out).sum(axis=-1, keepdims=True)
    return (out * (dout - inner) / ctx["temperature"],)


def _xent_fwd(vals, ctx):
    probs = vals[0]
    return -(ctx["targets"] * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=-1)


def _xent_bwd(dout, vals, out, ctx):
    probs = vals[0]
    grad = np.where(probs > LOG_FLOOR, -ctx["targets"] / np.maximum(probs, LOG_FLOOR), 0.0)
    return (grad * dout[..., None],)


def _mean_fwd(vals, ctx):
    return vals[0].mean()


def _mean_bwd(dout, vals, out, ctx):
    return (np.full_like(vals[0], dout / vals[0].size),)


def _sum_fwd(vals, ctx):
    return vals[0].sum()


def _sum_bwd(dout, vals, out, ctx):
    return (np.full_like(vals[0], dout),)


def _wsum_fwd(vals, ctx):
    return (vals[0] * ctx["weights"]).sum()


def _wsum_bwd(dout, vals, out, ctx):
    return (ctx["weights"] * dout,)


_OPS = {
    "conv2d": _Op(_conv2d_fwd, _conv2d_bwd),
    "relu": _Op(_relu_fwd, _relu_bwd),
    "maxpool": _Op(_maxpool_fwd, _maxpool_bwd),
    "flatten": _Op(_flatten_fwd, _flatten_bwd),
    "dense": _Op(_dense_fwd, _dense_bwd),
    "concat": _Op(_concat_fwd, _concat_bwd),
    "softmax_t": _Op(_softmax_fwd, _softmax_bwd),
    "cross_entropy": _Op(_xent_fwd, _xent_bwd),
    "mean": _Op(_mean_fwd, _mean_bwd),
    "sum": _Op(_sum_fwd, _sum_bwd),
    "weighted_sum": _Op(_wsum_fwd, _wsum_bwd),
}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def init_param_set(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParamSet:
    """Fan-in-scaled uniform weights, zero biases, drawn in manifest order."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, (w_shape, b_shape) in spec.param_shapes().items():
        fan_in = int(np.prod(w_shape[:-1]))
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=w_shape).astype(dtype)
        params[name] = (w, np.zeros(b_shape, dtype=dtype))
    return params


def cast_param_set(params: ParamSet, dtype) -> ParamSet:
    return {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in params.items()}


def check_param_set(spec: NetworkSpec, params: ParamSet) -> None:
    expected = spec.param_shapes()
    if set(params) != set(expected):
        raise NetworkConfigError(
            f"parameter names {sorted(params)} do not match manifest {sorted(expected)}")
    for name, (w_shape, b_shape) in expected.items():
        w, b = params[name]
        if tuple(w.shape) != w_shape or tuple(b.shape) != b_shape:
            raise NetworkConfigError(
                f"layer {name!r}: parameter shapes {w.shape}/{b.shape} "
                f"do not match expected {w_shape}/{b_shape}")


def forward(
    spec: NetworkSpec,
    params: ParamSet,
    x: np.ndarray,
    record: bool = False,
) -> tuple[np.ndarray, Optional[Tape]]:
    """Evaluate the network; returns pre-softmax logits (and the tape if recorded).

    `x` may be a single image (matching `spec.input_shape`) or a batch with a
    leading batch axis; logits come back with matching rank.
    """
    x = np.asarray(x)
    single = x.shape == tuple(spec.input_shape)
    xb = x[None] if single else x
    if xb.shape[1:] != tuple(spec.input_shape):
        raise NetworkConfigError(
            f"input shape {x.shape} does not match spec input {spec.input_shape}")
    check_param_set(spec, params)

    tape = Tape()
    tape.input_id = tape.new_node(xb)
    for name, (w, b) in params.items():
        tape.param_ids[name] = (tape.new_node(w), tape.new_node(b))

    node_of = {"input": tape.input_id}
    prev = "input"
    for layer in spec.layers:
        feeds = layer.inputs if layer.inputs is not None else (prev,)
        feed_ids = [node_of[n] for n in feeds]
        if layer.kind == "conv_relu":
            wid, bid = tape.param_ids[layer.name]
            nid = tape.apply("conv2d", (feed_ids[0], wid, bid))
            nid = tape.apply("relu", (nid,))
        elif layer.kind == "maxpool":
            nid = tape.apply("maxpool", (feed_ids[0],))
        elif layer.kind == "flatten":
            nid = tape.apply("flatten", (feed_ids[0],))
        elif layer.kind in ("dense", "dense_relu"):
            wid, bid = tape.param_ids[layer.name]
            nid = tape.apply("dense", (feed_ids[0], wid, bid))
            if layer.kind == "dense_relu":
                nid = tape.apply("relu", (nid,))
        elif layer.kind == "concat":
            nid = tape.apply("concat", tuple(feed_ids))
        else:  # unreachable: spec validated at construction
            raise NetworkConfigError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        node_of[layer.name] = nid
        prev = layer.name

    tape.logits_id = node_of[prev]
    logits = tape.values[tape.logits_id]
    out = logits[0] if single else logits
    return out, (tape if record else None)


def attach_cross_entropy(
    tape: Tape,
    targets: np.ndarray,
    temperature: float = 1.0,
    reduction: str = "mean",
) -> int:
    """Add softmax-at-T + cross-entropy head over the logits; marks the scalar."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    targets = np.asarray(targets, dtype=tape.values[tape.logits_id].dtype)
    if targets.ndim == 1:
        targets = targets[None]
    if targets.shape != tape.values[tape.logits_id].shape:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits "
            f"{tape.values[tape.logits_id].shape}")
    pid = tape.apply("softmax_t", (tape.logits_id,), {"temperature": float(temperature)})
    cid = tape.apply("cross_entropy", (pid,), {"targets": targets})
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    sid = tape.apply(reduction, (cid,))
    tape.scalar_id = sid
    return sid


def attach_weighted_logits(tape: Tape, weights: np.ndarray) -> int:
    """Add the scalar head sum(weights * logits); weights are constants."""
    logits = tape.values[tape.logits_id]
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.ndim == 1:
        weights = weights[None]
    if weights.shape != logits.shape:
        raise ValueError(f"weights shape {weights.shape} does not match logits {logits.shape}")
    sid = tape.apply("weighted_sum", (tape.logits_id,), {"weights": weights})
    tape.scalar_id = sid
    return sid


def backward(tape: Tape, head: Optional[int] = None) -> tuple[dict, np.ndarray]:
    """Gradients of the scalar head w.r.t. every parameter and the input.

    Returns ({layer: (dW, db)}, d_input).  A tape may carry several heads;
    pass `head` to differentiate one other than the most recently attached.
    """
    head = tape.scalar_id if head is None else head
    if head is None:
        raise TapeUsageError("no scalar head marked on tape; attach a loss first")
    if np.ndim(tape.values[head]) != 0:
        raise TapeUsageError("marked head is not a scalar")

    grads: dict[int, np.ndarray] = {head: np.asarray(1.0, dtype=tape.values[head].dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        in_vals = [tape.values[i] for i in rec.in_ids]
        in_grads = _OPS[rec.op].backward(g, in_vals, tape.values[rec.out_id], rec.ctx)
        for node, grad in zip(rec.in_ids, in_grads):
            if grad is None:
                continue
            if node in grads:
                grads[node] += grad
            else:
                grads[node] = grad

    param_grads = {
        name: (
            grads.get(wid, np.zeros_like(tape.values[wid])),
            grads.get(bid, np.zeros_like(tape.values[bid])),
        )
        for name, (wid, bid) in tape.param_ids.items()
    }
    input_grad = grads.get(tape.input_id, np.zeros_like(tape.values[tape.input_id]))
    return param_grads, input_grad


# ---------------------------------------------------------------------------
# Standalone numeric ops (rank-1 conveniences used throughout the package)
# ---------------------------------------------------------------------------

def softmax_t(z: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax of a logit vector, max-subtracted for overflow safety."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z)
    if z.ndim != 1:
        raise ValueError(f"expected a rank-1 logit vector, got shape {z.shape}")
    return _softmax_fwd([z], {"temperature": float(temperature)})


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """-sum(target * log(probs)) with probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ValueError(f"probs shape {probs.shape} != target shape {target.shape}")
    if abs(float(target.sum()) - 1.0) > 1e-6:
        raise ValueError(f"target must sum to 1, got {float(target.sum()):.8f}")
    return float(-(target * np.log(np.maximum(probs, LOG_FLOOR))).sum())


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tolerance


def _relu_signs(tape: Tape) -> list[np.ndarray]:
    return [tape.values[rec.in_ids[0]] > 0 for rec in tape.records if rec.op == "relu"]


def finite_diff_check(
    spec: NetworkSpec,
    params: ParamSet,
    x: np.ndarray,
    tolerance: float = 1e-4,
    step: float = 1e-3,
    samples: int = 60,
    seed: int = 0,
    temperature: float = 1.0,
) -> FiniteDiffReport:
    """Compare the tape gradient with 64-bit central finite differences.

    Samples coordinates across every parameter array and the input.  A
    coordinate whose +/-step evaluations land on different sides of any ReLU
    kink is non-comparable and excluded from the maximum.
    """
    rng = np.random.default_rng(seed)
    params64 = cast_param_set(params, np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    width = spec.output_width
    target_row = np.full(width, 1.0 / width)  # fixed smooth target couples every logit

    def loss_and_signs(p: ParamSet, xv: np.ndarray):
        logits, tape = forward(spec, p, xv, record=True)
        batch = logits[None] if logits.ndim == 1 else logits
        targets = np.broadcast_to(target_row, batch.shape)
        attach_cross_entropy(tape, targets, temperature=temperature, reduction="mean")
        return float(tape.values[tape.scalar_id]), _relu_signs(tape)

    _, tape = forward(spec, params64, x64, record=True)
    batch_shape = tape.values[tape.logits_id].shape
    attach_cross_entropy(
        tape, np.broadcast_to(target_row, batch_shape), temperature=temperature, reduction="mean")
    param_grads, input_grad = backward(tape)

    # flat coordinate universe: (array kind, layer, which, index)
    coords: list[tuple[str, str, int, int]] = []
    for name, (w, b) in params64.items():
        coords += [("param", name, 0, i) for i in range(w.size)]
        coords += [("param", name, 1, i) for i in range(b.size)]
    coords += [("input", "", 0, i) for i in range(x64.size)]
    picks = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)

    max_rel = 0.0
    checked = 0
    skipped = 0
    for pick in picks:
        kind, name, which, idx = coords[pick]
        if kind == "param":
            analytic = float(param_grads[name][which].flat[idx])
        else:
            analytic = float(input_grad.flat[idx])

        def perturbed(delta):
            p = {k: (w.copy(), b.copy()) for k, (w, b) in params64.items()}
            xv = x64.copy()
            if kind == "param":
                arr = p[name][which]
                arr.flat[idx] += delta
            else:
                xv.flat[idx] += delta
            return loss_and_signs(p, xv)

        up, signs_up = perturbed(step)
        down, signs_down = perturbed(-step)
        if any(not np.array_equal(a, b) for a, b in zip(signs_up, signs_down)):
            skipped += 1  # the step straddles a ReLU kink: derivative not comparable
            continue
        numeric = (up - down) / (2 * step)
        # small-denominator guard: coordinates with near-zero gradient are
        # measured against the floor, else truncation error dominates the ratio
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        max_rel = max(max_rel, rel)
        checked += 1

    return FiniteDiffReport(max_rel_error=max_rel, checked=checked,
                            skipped=skipped, tolerance=tolerance)
