"""Dense numerics used by the router.

A small fully connected network trained with plain mini-batch SGD, plug-in and
critic-based mutual information estimators, and a finite-difference gradient
check. Everything is float64 numpy and deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cdr.errors import InvalidInputError, TrainingDivergedError
from cdr.rng import stream

ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")
LOSSES = ("squared_error", "binary_cross_entropy", "dv_mi_objective")

PROB_TOL = 1e-9


def as_vector(values, name: str = "input") -> np.ndarray:
    """Validate a finite 1-D real vector and return it as float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logmeanexp(v: np.ndarray) -> float:
    m = float(np.max(v))
    return m + math.log(float(np.mean(np.exp(v - m))))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights of a feedforward network.

    ``weights[i]`` has shape ``(layer_sizes[i + 1], layer_sizes[i])`` and maps
    layer ``i`` to layer ``i + 1``. Hidden layers use ``activation``; the last
    layer uses ``output_activation``. Arrays are copied and frozen on
    construction.
    """

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise InvalidInputError(f"layer_sizes must hold >= 2 positive ints, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidInputError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidInputError("need one weight matrix and bias vector per layer transition")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise InvalidInputError(
                    f"layer {i}: expected W{(sizes[i + 1], sizes[i])} b({sizes[i + 1]},), "
                    f"got W{w.shape} b{b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        seed: int,
        init_scale: float = 0.5,
        activation: str = "tanh",
        output_activation: str = "identity",
    ) -> "MlpParams":
        """Uniform init in ``[-init_scale, init_scale]``; layer ``i`` draws from its own stream."""
        if init_scale <= 0:
            raise InvalidInputError("init_scale must be positive")
        sizes = tuple(int(s) for s in layer_sizes)
        ws, bs = [], []
        for i in range(len(sizes) - 1):
            g = stream(seed, 0, i)
            ws.append(g.uniform(-init_scale, init_scale, size=(sizes[i + 1], sizes[i])))
            bs.append(g.uniform(-init_scale, init_scale, size=sizes[i + 1]))
        return cls(sizes, tuple(ws), tuple(bs), activation, output_activation)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], activation="tanh", output_activation="identity"):
        sizes = tuple(int(s) for s in layer_sizes)
        ws = tuple(np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1))
        bs = tuple(np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1))
        return cls(sizes, ws, bs, activation, output_activation)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(vec[pos:pos + b.size])
            pos += b.size
        if pos != vec.size:
            raise InvalidInputError("flat parameter vector has the wrong length")
        return MlpParams(self.layer_sizes, tuple(ws), tuple(bs), self.activation, self.output_activation)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        try:
            sizes = [int(v) for v in d["layer_sizes"]]
            ws = tuple(np.array(w, dtype=np.float64).reshape(sizes[i + 1], sizes[i])
                       for i, w in enumerate(d["weights"]))
            bs = tuple(np.array(b, dtype=np.float64) for b in d["biases"])
            return cls(tuple(sizes), ws, bs, d.get("activation", "tanh"),
                       d.get("output_activation", "identity"))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InvalidInputError(f"malformed network parameters: {exc}") from exc

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
            and self.output_activation == other.output_activation
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None


def _hidden(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _hidden_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _forward(params: MlpParams, x: np.ndarray):
    zs, acts = [], [x]
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if i < last:
            a = _hidden(z, params.activation)
        elif params.output_activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        zs.append(z)
        acts.append(a)
    return zs, acts


def _backward(params: MlpParams, zs, acts, dz):
    """Backpropagate ``dz`` (gradient w.r.t. the last pre-activation)."""
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = dz.T @ acts[i]
        gb[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ params.weights[i]
            dz = da * _hidden_grad(zs[i - 1], acts[i], params.activation)
    return gw, gb


def _as_batch(x, width: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if width != 1 or arr.size == 1 else arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise InvalidInputError(f"{name}: expected width {width}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def mlp_forward(params: MlpParams, input) -> np.ndarray:
    """Evaluate the network on one input vector (or a batch of row vectors)."""
    arr = np.asarray(input, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        if arr.shape[0] != params.n_inputs:
            raise InvalidInputError(
                f"input length {arr.shape[0]} does not match input layer size {params.n_inputs}"
            )
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2 or arr.shape[1] != params.n_inputs:
        raise InvalidInputError(f"input shape {arr.shape} does not match input layer size {params.n_inputs}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("input contains non-finite values")
    out = _forward(params, arr)[1][-1]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Data containers and losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Paired samples; ``x`` is ``(n, dx)`` and ``y`` is ``(n, dy)``.

    1-D inputs are read as a column of scalars.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.ndim != 2 or y.ndim != 2:
            raise InvalidInputError("samples must be 1-D or 2-D arrays")
        if x.shape[0] == 0:
            raise InvalidInputError("sample set is empty")
        if x.shape[0] != y.shape[0]:
            raise InvalidInputError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidInputError("samples contain non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")
        if not self.init_scale > 0:
            raise InvalidInputError("init_scale must be > 0")


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with no fixed points (a single random cycle)."""
    if n < 2:
        raise InvalidInputError("a derangement needs at least 2 elements")
    order = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.roll(order, -1)
    return out


def _output_grad(params: MlpParams, z_last, a_last, d_out):
    if params.output_activation == "sigmoid":
        return d_out * a_last * (1.0 - a_last)
    return d_out


def _loss_and_grad(params: MlpParams, x, t, loss: str, neg_index=None, need_grad=True):
    """Mean loss over the batch and (optionally) its parameter gradients."""
    n = x.shape[0]
    if loss == "dv_mi_objective":
        joint = np.hstack([x, t])
        marg = np.hstack([x, t[neg_index]])
        zs, acts = _forward(params, np.vstack([joint, marg]))
        out = acts[-1][:, 0]
        shift_free = params.output_activation == "identity"
        if shift_free:
            # the objective ignores a constant offset of T, so drop the output bias exactly
            out = (acts[-2] @ params.weights[-1].T)[:, 0]
        tj, tm = out[:n], out[n:]
        lme = _logmeanexp(tm)
        value = -(float(np.mean(tj)) - lme)
        if not need_grad:
            return value, None
        w = np.exp(tm - np.max(tm))
        d_out = np.concatenate([np.full(n, -1.0 / n), w / w.sum()]).reshape(-1, 1)
        dz = _output_grad(params, zs[-1], acts[-1], d_out)
        gw, gb = _backward(params, zs, acts, dz)
        if shift_free:
            gb[-1][:] = 0.0
        return value, (gw, gb)

    zs, acts = _forward(params, x)
    if loss == "squared_error":
        resid = acts[-1] - t
        value = 0.5 * float(np.sum(resid * resid)) / n
        if not need_grad:
            return value, None
        dz = _output_grad(params, zs[-1], acts[-1], resid / n)
    elif loss == "binary_cross_entropy":
        # computed on the final pre-activation, read as a logit
        z = zs[-1]
        value = float(np.sum(np.logaddexp(0.0, z) - t * z)) / n
        if not need_grad:
            return value, None
        dz = (sigmoid(z) - t) / n
    else:
        raise InvalidInputError(f"unsupported loss {loss!r}; expected one of {LOSSES}")
    return value, _backward(params, zs, acts, dz)


def _check_loss_shapes(params: MlpParams, x, t, loss):
    if loss not in LOSSES:
        raise InvalidInputError(f"unsupported loss {loss!r}; expected one of {LOSSES}")
    if loss == "dv_mi_objective":
        if x.shape[1] + t.shape[1] != params.n_inputs or params.n_outputs != 1:
            raise InvalidInputError(
                f"critic needs {x.shape[1] + t.shape[1]} inputs and 1 output, "
                f"got {params.layer_sizes}"
            )
    else:
        if x.shape[1] != params.n_inputs or t.shape[1] != params.n_outputs:
            raise InvalidInputError(
                f"data shapes ({x.shape[1]}, {t.shape[1]}) do not match network {params.layer_sizes}"
            )
    if loss == "binary_cross_entropy" and (np.any(t < 0) or np.any(t > 1)):
        raise InvalidInputError("binary cross-entropy targets must lie in [0, 1]")


def evaluate_loss(params: MlpParams, data: SampleSet, loss: str, seed: int = 0) -> float:
    """Mean loss over the full data set.

    For ``dv_mi_objective`` the negatives are a derangement drawn from ``seed``.
    """
    _check_loss_shapes(params, data.x, data.y, loss)
    neg = derangement(len(data), stream(seed, 2)) if loss == "dv_mi_objective" else None
    return _loss_and_grad(params, data.x, data.y, loss, neg, need_grad=False)[0]


def mlp_train(
    params: MlpParams,
    data: SampleSet,
    loss: str,
    config: TrainConfig,
    history: list | None = None,
) -> MlpParams:
    """Train with plain mini-batch SGD and return the updated parameters.

    Each epoch visits the data in an order drawn from ``(config.seed, epoch)``.
    For ``dv_mi_objective`` the negatives of each batch are a derangement of
    its ``y`` rows. With ``batch_size >= len(data)`` this is full-batch gradient
    descent, which decreases the loss monotonically whenever ``learning_rate``
    is below ``2 / L`` for the loss's gradient Lipschitz constant ``L``.

    Args:
        params: starting weights; never mutated.
        data: training pairs (inputs and targets, or x and y for the critic).
        loss: one of :data:`LOSSES`.
        config: optimisation settings.
        history: if given, receives the full-data loss after every epoch.

    Raises:
        TrainingDivergedError: the loss or the weights stop being finite.
    """
    _check_loss_shapes(params, data.x, data.y, loss)
    x, t = data.x, data.y
    n = len(data)
    dv = loss == "dv_mi_objective"
    if dv and n < 2:
        raise InvalidInputError("the critic objective needs at least 2 samples")
    ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    eval_neg = derangement(n, stream(config.seed, 2)) if dv else None
    lr = config.learning_rate
    current = params
    for epoch in range(config.epochs):
        order = stream(config.seed, 1, epoch).permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if dv:
                if idx.size < 2:
                    continue
                neg = derangement(idx.size, stream(config.seed, 3, epoch, bi))
            else:
                neg = None
            _, (gw, gb) = _loss_and_grad(current, x[idx], t[idx], loss, neg)
            with np.errstate(over="ignore", invalid="ignore"):
                for i in range(len(ws)):
                    ws[i] -= lr * gw[i]
                    bs[i] -= lr * gb[i]
            if not all(np.all(np.isfinite(w)) for w in ws) or not all(np.all(np.isfinite(b)) for b in bs):
                raise TrainingDivergedError(epoch, float("nan"))
            current = MlpParams(current.layer_sizes, tuple(ws), tuple(bs),
                                current.activation, current.output_activation)
        with np.errstate(over="ignore", invalid="ignore"):
            value = _loss_and_grad(current, x, t, loss, eval_neg, need_grad=False)[0]
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        if history is not None:
            history.append(value)
    return current


def gradient_check(
    params: MlpParams,
    input,
    target,
    loss: str,
    step: float = 1e-5,
    neg_index=None,
) -> float:
    """Largest relative gap between backprop and central finite differences.

    The relative error of each parameter is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``. For the critic loss,
    ``input``/``target`` are the x and y samples and the negatives default to a
    fixed derangement.
    """
    if loss not in LOSSES:
        raise InvalidInputError(f"unsupported loss {loss!r}")
    if loss == "dv_mi_objective":
        x = np.asarray(input, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        x = x.reshape(-1, 1) if x.ndim == 1 else x
        t = t.reshape(-1, 1) if t.ndim == 1 else t
        if neg_index is None:
            neg_index = derangement(x.shape[0], stream(0, 2))
    else:
        x = _as_batch(input, params.n_inputs, "input")
        t = _as_batch(target, params.n_outputs, "target")
    _check_loss_shapes(params, x, t, loss)
    _, (gw, gb) = _loss_and_grad(params, x, t, loss, neg_index)
    analytic = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gw, gb)])
    theta = params.flat()
    numeric = np.empty_like(theta)
    for k in range(theta.size):
        plus = theta.copy()
        plus[k] += step
        minus = theta.copy()
        minus[k] -= step
        lp = _loss_and_grad(params.with_flat(plus), x, t, loss, neg_index, need_grad=False)[0]
        lm = _loss_and_grad(params.with_flat(minus), x, t, loss, neg_index, need_grad=False)[0]
        numeric[k] = (lp - lm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Information measures (nats)
# ---------------------------------------------------------------------------


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError(f"{name} has negative or non-finite entries")
    if abs(float(p.sum()) - 1.0) > PROB_TOL:
        raise InvalidInputError(f"{name} sums to {float(p.sum())!r}, not 1")


def entropy(dist) -> float:
    """Shannon entropy in nats, with ``0 ln 0 = 0``."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidInputError("distribution must be 1-D")
    _check_distribution(p, "distribution")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    """Joint probability table, rows indexed by x state and columns by y state."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=np.float64)
        if p.ndim != 2:
            raise InvalidInputError("joint must be a 2-D table")
        _check_distribution(p, "joint")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @property
    def px(self) -> np.ndarray:
        return self.probabilities.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.probabilities.sum(axis=0)

    def transpose(self) -> "DiscreteJoint":
        return DiscreteJoint(self.probabilities.T)

    def __eq__(self, other):
        if not isinstance(other, DiscreteJoint):
            return NotImplemented
        return np.array_equal(self.probabilities, other.probabilities)

    __hash__ = None


def _as_joint(joint) -> DiscreteJoint:
    return joint if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint)


def mi_exact(joint) -> float:
    """Mutual information of a discrete joint in nats; zero cells are skipped."""
    j = _as_joint(joint)
    p = j.probabilities
    outer = np.outer(j.px, j.py)
    mask = p > 0
    mi = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(outer[mask]))))
    return max(0.0, mi)


def mi_histogram(samples: SampleSet, bins_per_dim: int = 8) -> float:
    """Plug-in MI of the equal-width binned empirical joint of scalar x and y."""
    if not isinstance(samples, SampleSet):
        samples = SampleSet(*samples)
    if samples.x.shape[1] != 1 or samples.y.shape[1] != 1:
        raise InvalidInputError("histogram estimator needs scalar x and y")
    if bins_per_dim < 2:
        raise InvalidInputError("bins_per_dim must be >= 2")
    counts, _, _ = np.histogram2d(samples.x[:, 0], samples.y[:, 0], bins=bins_per_dim)
    return mi_exact(counts / counts.sum())


DEFAULT_CRITIC_CONFIG = TrainConfig(learning_rate=0.1, epochs=60, batch_size=128, seed=0, init_scale=0.5)


def dv_estimate(params: MlpParams, x: np.ndarray, y: np.ndarray, seed: int = 0, shuffles: int = 8) -> float:
    """Donsker-Varadhan value ``E_P[T] - ln E_{PxP}[e^T]`` of a trained critic.

    The product-of-marginals term pools ``shuffles`` independent derangements
    of ``y``.
    """
    n = x.shape[0]
    tj = mlp_forward(params, np.hstack([x, y]))[:, 0]
    tm = np.concatenate([
        mlp_forward(params, np.hstack([x, y[derangement(n, stream(seed, 4, s))]]))[:, 0]
        for s in range(shuffles)
    ])
    return float(np.mean(tj)) - _logmeanexp(tm)


def mi_critic(
    samples: SampleSet,
    critic_cfg: TrainConfig = DEFAULT_CRITIC_CONFIG,
    critic_sizes: Sequence[int] = (16, 16),
) -> float:
    """Neural MI lower-bound estimate in nats.

    Trains a critic ``T(x, y)`` (hidden sizes ``critic_sizes``, tanh, linear
    output) on the Donsker-Varadhan objective, then evaluates the bound on the
    same samples.
    """
    if not isinstance(samples, SampleSet):
        samples = SampleSet(*samples)
    if len(samples) < 100:
        raise InvalidInputError("critic estimation needs at least 100 samples")
    sizes = (samples.x.shape[1] + samples.y.shape[1], *critic_sizes, 1)
    params = MlpParams.init(sizes, critic_cfg.seed, critic_cfg.init_scale, "tanh", "identity")
    params = mlp_train(params, samples, "dv_mi_objective", critic_cfg)
    return dv_estimate(params, samples.x, samples.y, seed=critic_cfg.seed)
