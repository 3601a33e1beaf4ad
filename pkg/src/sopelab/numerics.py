"""Dense networks with hand-written reverse mode, layer norm, dropout and Adam.

A network is a stack of affine layers. Hidden layers apply, in order,
dropout (train mode only), optional layer normalization and an activation;
the output layer is affine followed by its own activation (normally
identity).

Ensembles are stored stacked: every weight has a leading member axis of
size ``ensemble`` and inputs of shape ``(batch, in)`` are broadcast to all
members, so one matmul evaluates the whole ensemble.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, NumericError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")
VAR_FLOOR = 1e-6
MAGIC = b"SOPE1"


@dataclass
class MlpParams:
    weights: list
    biases: list
    norm_gains: list
    norm_shifts: list
    activations: list
    keep_prob: float = 1.0
    ensemble: int | None = None
    version: int = 0

    def __post_init__(self):
        n = len(self.weights)
        if not (len(self.biases) == len(self.activations) == n == len(self.norm_gains) == len(self.norm_shifts)):
            raise ConfigError("per-layer lists must have equal length")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        for k in range(n - 1):
            if self.weights[k].shape[-1] != self.weights[k + 1].shape[-2]:
                raise ConfigError(f"layer {k} output width does not match layer {k + 1} input width")

    @property
    def widths(self):
        return [self.weights[0].shape[-2]] + [w.shape[-1] for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self):
        """All trainable arrays in declaration order (layer by layer: W, b, gain, shift)."""
        out = []
        for k in range(self.n_layers):
            out.append(self.weights[k])
            out.append(self.biases[k])
            if self.norm_gains[k] is not None:
                out.append(self.norm_gains[k])
                out.append(self.norm_shifts[k])
        return out

    def array_names(self):
        names = []
        for k in range(self.n_layers):
            names += [f"layer{k}.weight", f"layer{k}.bias"]
            if self.norm_gains[k] is not None:
                names += [f"layer{k}.norm_gain", f"layer{k}.norm_shift"]
        return names

    def with_arrays(self, arrays):
        """A structurally identical network holding ``arrays``."""
        arrays = list(arrays)
        it = iter(arrays)
        weights, biases, gains, shifts = [], [], [], []
        for k in range(self.n_layers):
            weights.append(next(it))
            biases.append(next(it))
            if self.norm_gains[k] is not None:
                gains.append(next(it))
                shifts.append(next(it))
            else:
                gains.append(None)
                shifts.append(None)
        return MlpParams(weights, biases, gains, shifts, list(self.activations),
                         self.keep_prob, self.ensemble)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def select(self, members):
        """Sub-ensemble holding only ``members`` (a copy)."""
        if self.ensemble is None:
            raise UsageError("select() needs an ensemble network")
        members = np.asarray(members)
        out = self.with_arrays([a[members] for a in self.arrays()])
        out.ensemble = len(members)
        return out

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init_mlp(widths, rng, activations=None, layer_norm=False, keep_prob=1.0,
             ensemble=None, dtype=np.float64, hidden="relu", output="identity"):
    """Fan-in scaled uniform weights, zero biases, unit gains.

    ``layer_norm`` and ``keep_prob`` apply to hidden layers only.
    """
    widths = list(widths)
    if len(widths) < 2:
        raise ConfigError("need at least an input and an output width")
    n = len(widths) - 1
    if activations is None:
        activations = [hidden] * (n - 1) + [output]
    lead = () if ensemble is None else (ensemble,)
    bias_lead = () if ensemble is None else (ensemble, 1)
    weights, biases, gains, shifts = [], [], [], []
    for k in range(n):
        fan_in, fan_out = widths[k], widths[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(bias_lead + (fan_out,), dtype=dtype))
        if layer_norm and k < n - 1:
            gains.append(np.ones(bias_lead + (fan_out,), dtype=dtype))
            shifts.append(np.zeros(bias_lead + (fan_out,), dtype=dtype))
        else:
            gains.append(None)
            shifts.append(None)
    return MlpParams(weights, biases, gains, shifts, activations, keep_prob, ensemble)


@dataclass
class FlopCounter:
    """Dense-layer multiply-add counter: 2 FLOPs per MAC, backward = 2x forward."""

    forward: int = 0
    backward: int = 0

    @property
    def total(self):
        return self.forward + self.backward


def dense_flops(params, batch):
    members = 1 if params.ensemble is None else params.ensemble
    return sum(2 * w.shape[-2] * w.shape[-1] for w in params.weights) * batch * members


@dataclass
class Tape:
    params_id: int
    version: int
    batch: int
    squeeze: bool
    layers: list = field(default_factory=list)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def layer_norm(x, gain, shift):
    """Normalize over the last axis (population variance, floored), then scale and shift."""
    x = np.asarray(x, dtype=float)
    out, _, _ = _layer_norm_fwd(x, np.asarray(gain, dtype=x.dtype), np.asarray(shift, dtype=x.dtype))
    return out


def _row_mean(z):
    # gemv is several times faster than a ufunc reduction over a short last axis
    return z @ np.full((z.shape[-1], 1), 1.0 / z.shape[-1], dtype=z.dtype)


def _layer_norm_fwd(z, gain, shift):
    centered = z - _row_mean(z)
    var = _row_mean(centered * centered)
    floored = var < VAR_FLOOR
    if floored.any():
        var = np.where(floored, VAR_FLOOR, var)
    sigma = np.sqrt(var)
    xhat = centered / sigma
    return xhat * gain + shift, xhat, (sigma, floored)


def forward(params, x, train=False, rng=None, counter=None):
    """Evaluate the network on ``x`` of shape ``(in,)`` or ``(batch, in)``.

    Returns ``(output, tape)``. For ensembles the output gains a leading
    member axis. Dropout is active only with ``train=True`` and needs ``rng``.
    """
    x = np.asarray(x, dtype=params.dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.widths[0]:
        raise ConfigError(f"input width {x.shape[-1]} != network input width {params.widths[0]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    dropout = train and params.keep_prob < 1.0
    if dropout and rng is None:
        raise UsageError("train-mode dropout requires an rng")
    tape = Tape(id(params), params.version, x.shape[-2], squeeze)
    h = x
    last = params.n_layers - 1
    for k in range(params.n_layers):
        rec = {"input": h}
        z = h @ params.weights[k] + params.biases[k]
        if k < last:
            if dropout:
                mask = (rng.random(z.shape, dtype=z.dtype) < params.keep_prob).astype(z.dtype)
                mask *= z.dtype.type(1.0 / params.keep_prob)
                z = z * mask
                rec["mask"] = mask
            if params.norm_gains[k] is not None:
                z, xhat, (sigma, floored) = _layer_norm_fwd(z, params.norm_gains[k], params.norm_shifts[k])
                rec["xhat"], rec["sigma"], rec["floored"] = xhat, sigma, floored
        h = _activate(params.activations[k], z)
        rec["out"] = h
        tape.layers.append(rec)
    if counter is not None:
        counter.forward += dense_flops(params, tape.batch)
    if squeeze:
        h = h[..., 0, :]
    return h, tape


def backward(params, tape, upstream, need_input_grad=False, counter=None):
    """Gradient of ``sum(upstream * output)`` with respect to every parameter.

    Returns a parameter-shaped ``MlpParams`` of gradients, plus the input
    gradient when ``need_input_grad`` (summed over ensemble members).
    """
    if tape.params_id != id(params) or tape.version != params.version:
        raise UsageError("tape does not belong to the current state of these parameters")
    g = np.asarray(upstream, dtype=params.dtype)
    if tape.squeeze:
        g = g[..., None, :]
    ensemble = params.ensemble is not None
    n = params.n_layers
    gw, gb, gg, gs = [None] * n, [None] * n, [None] * n, [None] * n
    for k in reversed(range(n)):
        rec = tape.layers[k]
        kind = params.activations[k]
        if kind == "relu":
            g = g * (rec["out"] > 0)
        elif kind == "tanh":
            g = g * (1.0 - rec["out"] ** 2)
        if "xhat" in rec:
            xhat = rec["xhat"]
            gg[k] = (g * xhat).sum(axis=-2, keepdims=ensemble)
            gs[k] = g.sum(axis=-2, keepdims=ensemble)
            dxhat = g * params.norm_gains[k]
            mean_d = _row_mean(dxhat)
            mean_dx = _row_mean(dxhat * xhat)
            if rec["floored"].any():
                mean_dx = np.where(rec["floored"], 0.0, mean_dx)
            g = (dxhat - mean_d - xhat * mean_dx) / rec["sigma"]
        if "mask" in rec:
            g = g * rec["mask"]
        inp = rec["input"]
        gw[k] = np.swapaxes(inp, -1, -2) @ g
        gb[k] = g.sum(axis=-2, keepdims=ensemble)
        if k > 0 or need_input_grad:
            g = g @ np.swapaxes(params.weights[k], -1, -2)
    if counter is not None:
        counter.backward += 2 * dense_flops(params, tape.batch)
    grads = MlpParams(gw, gb, gg, gs, list(params.activations), params.keep_prob, params.ensemble)
    if need_input_grad:
        if ensemble and g.ndim == 3:
            g = g.sum(axis=0)
        if tape.squeeze:
            g = g[0]
        return grads, g
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ConfigError("Adam decay rates must lie in (0, 1)")
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, lr, beta1, beta2, eps)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    arrays, garrays = params.arrays(), grads.arrays()
    if len(arrays) != len(garrays) or len(arrays) != len(state.m):
        raise UsageError("gradient / optimizer state do not match the parameters")
    for name, g in zip(params.array_names(), garrays):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrays, garrays, state.m, state.v):
        if p.shape != g.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr != 0.0:
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def scalar_adam(value, grad, state):
    """Adam on a single float (the entropy temperature). ``state`` is a dict."""
    if not np.isfinite(grad):
        raise NumericError("non-finite temperature gradient")
    state["step"] += 1
    b1, b2 = state["beta1"], state["beta2"]
    state["m"] = b1 * state["m"] + (1 - b1) * grad
    state["v"] = b2 * state["v"] + (1 - b2) * grad * grad
    mhat = state["m"] / (1 - b1 ** state["step"])
    vhat = state["v"] / (1 - b2 ** state["step"])
    if state["lr"] == 0.0:
        return value
    return value - state["lr"] * mhat / (np.sqrt(vhat) + state["eps"])


# -- checkpoint layout ------------------------------------------------------
#
#   magic    5 bytes  b"SOPE1"
#   uint32   ensemble size (0 = single network)
#   uint32   layer count L
#   uint32   widths[L + 1]
#   L x (uint8 activation code, uint8 has_norm)
#   float64  keep probability
#   then every array of MlpParams.arrays() in declaration order,
#   row-major, float64 little-endian.

_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def dump_params(params, fh):
    widths = params.widths
    fh.write(MAGIC)
    fh.write(struct.pack("<II", params.ensemble or 0, params.n_layers))
    fh.write(struct.pack(f"<{len(widths)}I", *widths))
    for k in range(params.n_layers):
        fh.write(struct.pack("<BB", _ACT_CODE[params.activations[k]], params.norm_gains[k] is not None))
    fh.write(struct.pack("<d", params.keep_prob))
    for a in params.arrays():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read(fh, n, what):
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", pos)
    return buf


def read_params(fh, dtype=np.float64):
    start = fh.tell()
    if _read(fh, 5, "magic") != MAGIC:
        raise FormatError("bad magic, not a network checkpoint", start)
    ensemble, n_layers = struct.unpack("<II", _read(fh, 8, "header"))
    if n_layers == 0 or n_layers > 64:
        raise FormatError(f"implausible layer count {n_layers}", start + 9)
    widths = struct.unpack(f"<{n_layers + 1}I", _read(fh, 4 * (n_layers + 1), "widths"))
    acts, norms = [], []
    codes = _read(fh, 2 * n_layers, "layer flags")
    for k in range(n_layers):
        code, has_norm = codes[2 * k], codes[2 * k + 1]
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}", fh.tell() - 2 * n_layers + 2 * k)
        acts.append(ACTIVATIONS[code])
        norms.append(bool(has_norm))
    (keep_prob,) = struct.unpack("<d", _read(fh, 8, "keep probability"))
    ens = ensemble or None
    lead = () if ens is None else (ens,)
    bias_lead = () if ens is None else (ens, 1)

    def take(shape, what):
        count = int(np.prod(shape))
        buf = _read(fh, 8 * count, what)
        return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(dtype)

    weights, biases, gains, shifts = [], [], [], []
    for k in range(n_layers):
        weights.append(take(lead + (widths[k], widths[k + 1]), f"layer{k}.weight"))
        biases.append(take(bias_lead + (widths[k + 1],), f"layer{k}.bias"))
        if norms[k]:
            gains.append(take(bias_lead + (widths[k + 1],), f"layer{k}.norm_gain"))
            shifts.append(take(bias_lead + (widths[k + 1],), f"layer{k}.norm_shift"))
        else:
            gains.append(None)
            shifts.append(None)
    return MlpParams(weights, biases, gains, shifts, acts, keep_prob, ens)


def params_to_bytes(params):
    buf = io.BytesIO()
    dump_params(params, buf)
    return buf.getvalue()


def params_from_bytes(data, dtype=np.float64):
    return read_params(io.BytesIO(data), dtype)
