"""Dense feed-forward networks with hand-written derivatives.

The engine is a batched forward pass that also pushes forward-mode input
tangents through the network, and a reverse pass that pulls cotangents on
both the outputs and the output tangents back to the parameters and the
inputs. One pair of routines therefore gives

* parameter gradients (cotangent on outputs only),
* input Jacobians (tangents along unit input directions), and
* parameter gradients of input derivatives (cotangent on tangents only),

which is everything a PDE residual built from the network needs.

Flat parameter layout: for each layer in order, the weight matrix of shape
``(fan_out, fan_in)`` in row-major order followed by its bias vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"NLWRNET1\n"


class ShapeError(ValueError):
    pass


def _tanh(z):
    a = np.tanh(z)
    d1 = 1.0 - a * a
    return a, d1, -2.0 * a * d1


def _softplus(z):
    a = np.logaddexp(0.0, z)
    s = 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid, overflow-free
    return a, s, s * (1.0 - s)


def _identity(z):
    return z, None, None


ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "identity": _identity}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int = 1
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim) < 1 or self.hidden_layers < 0:
            raise ShapeError(f"invalid network dimensions in {self}")
        if self.hidden_layers > 0 and self.hidden_width < 1:
            raise ShapeError("hidden_width must be >= 1")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
        if self.activation == "identity" and self.hidden_layers > 0:
            raise ShapeError("hidden activation must be smooth and nonlinear")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i + 1] * s[i] + s[i + 1] for i in range(len(s) - 1))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into the flat parameter vector."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
        out, pos, s = [], 0, self.layer_sizes
        for i in range(len(s) - 1):
            n_in, n_out = s[i], s[i + 1]
            W = params[pos:pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            b = params[pos:pos + n_out]
            pos += n_out
            out.append((W, b))
        return out


def glorot_init(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    s = spec.layer_sizes
    for i in range(len(s) - 1):
        limit = np.sqrt(6.0 / (s[i] + s[i + 1]))
        chunks.append(rng.uniform(-limit, limit, size=s[i + 1] * s[i]))
        chunks.append(np.zeros(s[i + 1]))
    return np.concatenate(chunks)


@dataclass(frozen=True, eq=False)
class MlpNet:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=float)
        if p.shape != (self.spec.n_params,):
            raise ShapeError(f"expected {self.spec.n_params} parameters, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "MlpNet":
        return cls(spec, glorot_init(spec, rng))

    def with_params(self, params) -> "MlpNet":
        return MlpNet(self.spec, params)


# ---------------------------------------------------------------------------
# engine

class Tape:
    """Intermediates saved by :func:`forward_tangent` for the reverse pass."""

    __slots__ = ("spec", "layers", "records", "n_tan")

    def __init__(self, spec, layers, n_tan):
        self.spec = spec
        self.layers = layers
        self.records = []
        self.n_tan = n_tan


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim={dim}")
    return X, single


def forward_tangent(spec: MlpSpec, params, X, tangents: Sequence[np.ndarray] = ()):
    """Batched forward pass carrying input tangents.

    ``X`` has shape ``(B, input_dim)``; each tangent has the same shape (or is
    broadcastable to it). Returns ``(Y, [dY...], tape)`` where ``dY[s]`` is the
    directional derivative of the output along ``tangents[s]``.
    """
    layers = spec.unpack(params)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"input shape {X.shape} incompatible with input_dim={spec.input_dim}")
    tape = Tape(spec, layers, len(tangents))
    a = X
    adots = [np.broadcast_to(np.asarray(u, dtype=float), X.shape) for u in tangents]
    last = len(layers) - 1
    for li, (W, b) in enumerate(layers):
        z = a @ W.T + b
        zdots = [ad @ W.T for ad in adots]
        act = ACTIVATIONS[spec.output_activation if li == last else spec.activation]
        a_new, d1, d2 = act(z)
        if d1 is None:
            new_dots = zdots
        else:
            new_dots = [d1 * zd for zd in zdots]
        tape.records.append((a, adots, zdots, d1, d2))
        a, adots = a_new, new_dots
    return a, adots, tape


def backward(tape: Tape, gY, gYdots: Sequence = ()):
    """Reverse pass. Returns ``(g_params, g_X, [g_tangent...])``.

    ``gY`` is the cotangent on the outputs (or ``None`` for zero) and
    ``gYdots[s]`` the cotangent on output tangent ``s`` (``None`` for zero).
    """
    spec = tape.spec
    grads = []
    n_tan = tape.n_tan
    gYdots = list(gYdots) + [None] * (n_tan - len(gYdots))
    B = tape.records[0][0].shape[0]
    gA = np.zeros((B, spec.output_dim)) if gY is None else np.asarray(gY, dtype=float).reshape(B, spec.output_dim)
    gAd = [None if g is None else np.asarray(g, dtype=float).reshape(B, spec.output_dim) for g in gYdots]
    for (W, b), (a_prev, adots_prev, zdots, d1, d2) in zip(reversed(tape.layers), reversed(tape.records)):
        if d1 is None:
            gZ = gA
            gZd = gAd
        else:
            gZ = gA * d1
            gZd = []
            for gd, zd in zip(gAd, zdots):
                if gd is None:
                    gZd.append(None)
                else:
                    gZ = gZ + gd * d2 * zd
                    gZd.append(gd * d1)
        gW = gZ.T @ a_prev
        for gzd, ad in zip(gZd, adots_prev):
            if gzd is not None:
                gW = gW + gzd.T @ ad
        gb = gZ.sum(axis=0)
        grads.append((gW, gb))
        gA = gZ @ W
        gAd = [None if g is None else g @ W for g in gZd]
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    g_tan = [np.zeros((B, spec.input_dim)) if g is None else g for g in gAd]
    return flat, gA, g_tan


# ---------------------------------------------------------------------------
# public operations on single inputs or batches

def forward(net: MlpNet, x) -> np.ndarray:
    X, single = _as_batch(x, net.spec.input_dim)
    Y, _, _ = forward_tangent(net.spec, net.params, X)
    return Y[0] if single else Y


def grad_params(net: MlpNet, x, output_cotangent) -> np.ndarray:
    """Vector-Jacobian product of the outputs with respect to the flat parameters.

    For a batch the cotangent has shape ``(B, output_dim)`` and the result is
    summed over the batch.
    """
    X, single = _as_batch(x, net.spec.input_dim)
    _, _, tape = forward_tangent(net.spec, net.params, X)
    g = np.asarray(output_cotangent, dtype=float)
    if g.size != X.shape[0] * net.spec.output_dim:
        raise ShapeError(f"cotangent shape {g.shape} does not match outputs")
    gp, _, _ = backward(tape, g.reshape(X.shape[0], net.spec.output_dim))
    return gp


def grad_input(net: MlpNet, x) -> np.ndarray:
    """Input Jacobian, shape ``(output_dim, input_dim)`` (batched: ``(B, out, in)``)."""
    X, single = _as_batch(x, net.spec.input_dim)
    eye = np.eye(net.spec.input_dim)
    _, dY, _ = forward_tangent(net.spec, net.params, X, [eye[i] for i in range(net.spec.input_dim)])
    J = np.stack(dY, axis=-1)  # (B, out, in)
    return J[0] if single else J


def grad_params_of_input_grad(net: MlpNet, x, cotangent_on_input_grad) -> np.ndarray:
    """Gradient w.r.t. parameters of ``sum(C * d output / d input)``.

    ``C`` has the Jacobian's shape ``(output_dim, input_dim)`` (batched:
    ``(B, out, in)``; the result is summed over the batch).
    """
    X, single = _as_batch(x, net.spec.input_dim)
    C = np.asarray(cotangent_on_input_grad, dtype=float)
    C = C.reshape(X.shape[0], net.spec.output_dim, net.spec.input_dim)
    eye = np.eye(net.spec.input_dim)
    _, _, tape = forward_tangent(net.spec, net.params, X, [eye[i] for i in range(net.spec.input_dim)])
    gp, _, _ = backward(tape, None, [C[:, :, i] for i in range(net.spec.input_dim)])
    return gp


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON header line, raw little-endian float64 params

def save_net(net: MlpNet, path) -> Path:
    path = Path(path)
    header = json.dumps({"format": 1, "spec": asdict(net.spec), "n_params": net.spec.n_params},
                        sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode() + b"\n")
        fh.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())
    return path


def load_net(path) -> MlpNet:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        header = json.loads(fh.readline())
        if header.get("format") != 1:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
        spec = MlpSpec(**header["spec"])
        raw = fh.read()
    if len(raw) != 8 * spec.n_params:
        raise ValueError(f"{path}: truncated parameter block")
    return MlpNet(spec, np.frombuffer(raw, dtype="<f8").astype(float))
