"""Fast/slow routing: scoring policies, the threshold rule and its online update."""

from __future__ import annotations

import enum
import json
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

from cdr.errors import (
    DegenerateLabelsError,
    InsufficientEvidenceError,
    InvalidInputError,
    InvalidPolicyError,
)
from cdr.features import FeatureVector
from cdr.numeric import MlpParams, SampleSet, TrainConfig, mlp_forward, mlp_train, sigmoid
from cdr.rng import stream

POLICY_FORMAT_VERSION = 1
N_FEATURES = 4


class Strategy(str, enum.Enum):
    FAST = "fast"
    SLOW = "slow"


def _feature_array(features) -> np.ndarray:
    if isinstance(features, FeatureVector):
        return features.as_array()
    arr = np.asarray(features, dtype=np.float64)
    if arr.shape[-1] != N_FEATURES:
        raise InvalidInputError(f"expected {N_FEATURES} features, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearPolicy:
    weights: tuple[float, float, float, float]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != N_FEATURES or not all(math.isfinite(v) for v in w):
            raise InvalidPolicyError("linear policy needs 4 finite weights")
        object.__setattr__(self, "weights", w)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ np.array(self.weights)


@dataclass(frozen=True)
class NeuralPolicy:
    net: MlpParams

    def __post_init__(self):
        if self.net.n_inputs != N_FEATURES or self.net.n_outputs != 1:
            raise InvalidPolicyError(f"neural policy must map 4 inputs to 1 output, got {self.net.layer_sizes}")
        if self.net.output_activation != "sigmoid":
            raise InvalidPolicyError("neural policy needs a sigmoid output")

    def scores(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, np.atleast_2d(x))[:, 0]


@dataclass(frozen=True)
class Leaf:
    score: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


def _tree_depth(node) -> int:
    if isinstance(node, Leaf):
        return 0
    if isinstance(node, Split):
        return 1 + max(_tree_depth(node.left), _tree_depth(node.right))
    raise InvalidPolicyError(f"unexpected tree node {node!r}")


def _check_node(node) -> None:
    if isinstance(node, Leaf):
        if not (math.isfinite(node.score) and 0.0 <= node.score <= 1.0):
            raise InvalidPolicyError(f"leaf score {node.score!r} outside [0, 1]")
    elif isinstance(node, Split):
        if not 0 <= node.feature < N_FEATURES:
            raise InvalidPolicyError(f"split feature index {node.feature} outside 0..3")
        if not math.isfinite(node.threshold):
            raise InvalidPolicyError("split threshold must be finite")
        _check_node(node.left)
        _check_node(node.right)
    else:
        raise InvalidPolicyError(f"malformed tree node {node!r}")


@dataclass(frozen=True)
class TreePolicy:
    """Binary tree; at a split, ``x[feature] < threshold`` goes left."""

    root: TreeNode
    max_depth: int

    def __post_init__(self):
        _check_node(self.root)
        if self.max_depth < 0 or _tree_depth(self.root) > self.max_depth:
            raise InvalidPolicyError("tree is deeper than max_depth")

    @property
    def depth(self) -> int:
        return _tree_depth(self.root)

    def score_one(self, x: Sequence[float]) -> float:
        node = self.root
        while isinstance(node, Split):
            node = node.left if x[node.feature] < node.threshold else node.right
        if not isinstance(node, Leaf):
            raise InvalidPolicyError("tree descent ended on a non-leaf")
        return node.score

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.array([self.score_one(row) for row in x])


Policy = Union[LinearPolicy, NeuralPolicy, TreePolicy]


def score_linear(policy: LinearPolicy, features) -> float:
    x = _feature_array(features)
    return float(math.fsum(w * v for w, v in zip(policy.weights, x)))


def score_neural(policy: NeuralPolicy, features) -> float:
    x = _feature_array(features)
    return float(mlp_forward(policy.net, x)[0])


def score_tree(policy: TreePolicy, features) -> float:
    return policy.score_one(_feature_array(features))


def score(policy: Policy, features) -> float:
    if isinstance(policy, LinearPolicy):
        return score_linear(policy, features)
    if isinstance(policy, NeuralPolicy):
        return score_neural(policy, features)
    if isinstance(policy, TreePolicy):
        return score_tree(policy, features)
    raise InvalidPolicyError(f"not a routing policy: {type(policy).__name__}")


def score_batch(policy: Policy, x: np.ndarray) -> np.ndarray:
    """Scores for each row of an ``(n, 4)`` feature matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(policy, LinearPolicy):
        return np.array([score_linear(policy, row) for row in x])
    return policy.scores(x)


def policy_kind(policy: Policy) -> str:
    return {LinearPolicy: "linear", NeuralPolicy: "neural", TreePolicy: "tree"}[type(policy)]


# ---------------------------------------------------------------------------
# Decision rule and threshold adaptation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingDecision:
    strategy: Strategy
    score: float
    tau_at_decision: float
    features: FeatureVector | None = None


def route(score: float, state: "ThresholdState | float", features: FeatureVector | None = None) -> RoutingDecision:
    """Fast when ``score < tau``, otherwise Slow (a tie goes Slow)."""
    tau = state if isinstance(state, (int, float)) else state.tau
    if not math.isfinite(score):
        raise InvalidInputError("routing score must be finite")
    strategy = Strategy.FAST if score < tau else Strategy.SLOW
    return RoutingDecision(strategy, float(score), float(tau), features)


@dataclass(frozen=True)
class Outcome:
    """Result of one routed query.

    ``counterfactual_correct`` is the other strategy's result when both ran.
    ``tag`` is free-form and ignored by the update rule.
    """

    strategy: Strategy
    correct: bool
    counterfactual_correct: bool | None = None
    tag: object = None

    def result_for(self, strategy: Strategy) -> bool | None:
        if strategy == self.strategy:
            return self.correct
        return self.counterfactual_correct


@dataclass
class ThresholdState:
    tau: float = 0.5
    alpha: float = 0.01
    window_size: int = 100
    tau_min: float = 0.05
    tau_max: float = 0.95
    window: deque = field(default=None, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be > 0")
        if self.window_size < 1:
            raise InvalidInputError("window_size must be >= 1")
        if not self.tau_min <= self.tau_max:
            raise InvalidInputError("tau_min must not exceed tau_max")
        self.tau = min(self.tau_max, max(self.tau_min, float(self.tau)))
        self.window = deque(self.window or (), maxlen=self.window_size)

    def copy(self) -> "ThresholdState":
        return ThresholdState(self.tau, self.alpha, self.window_size, self.tau_min, self.tau_max, deque(self.window))


def record_outcome(state: ThresholdState, outcome: Outcome) -> ThresholdState:
    """Append to the outcome window, evicting the oldest entry once full."""
    state.window.append(outcome)
    return state


def window_accuracies(state: ThresholdState) -> tuple[float | None, float | None]:
    """(slow accuracy, fast accuracy) over the window, counterfactuals included."""
    accs = []
    for strategy in (Strategy.SLOW, Strategy.FAST):
        seen = [r for r in (o.result_for(strategy) for o in state.window) if r is not None]
        accs.append(sum(seen) / len(seen) if seen else None)
    return accs[0], accs[1]


def update_threshold(state: ThresholdState) -> ThresholdState:
    """``tau += alpha * sign(acc_slow - acc_fast)``, clamped to ``[tau_min, tau_max]``.

    Raises:
        InsufficientEvidenceError: the window has no result for one strategy;
            ``tau`` is left unchanged.
    """
    acc_slow, acc_fast = window_accuracies(state)
    if acc_slow is None or acc_fast is None:
        missing = "slow" if acc_slow is None else "fast"
        raise InsufficientEvidenceError(f"no {missing} outcomes in the current window")
    delta = acc_slow - acc_fast
    step = (delta > 0) - (delta < 0)
    if step:
        state.tau = min(state.tau_max, max(state.tau_min, state.tau + state.alpha * step))
    return state


class Router:
    """Thread-safe pairing of a policy with an adaptive threshold.

    ``decide`` may be called concurrently and reads a snapshot of tau;
    ``observe`` serializes window updates and threshold steps.
    """

    def __init__(self, policy: Policy, state: ThresholdState | None = None):
        self.policy = policy
        self.state = state or ThresholdState()
        self._lock = threading.Lock()

    @property
    def tau(self) -> float:
        return self.state.tau

    def decide(self, features: FeatureVector) -> RoutingDecision:
        tau = self.state.tau
        return route(score(self.policy, features), tau, features)

    def observe(self, outcome: Outcome) -> bool:
        """Record an outcome and try a threshold step; True if a step was evaluated."""
        with self._lock:
            record_outcome(self.state, outcome)
            try:
                update_threshold(self.state)
            except InsufficientEvidenceError:
                return False
            return True


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _training_arrays(data, labels=None):
    if labels is None:
        feats, labels = zip(*data) if data else ((), ())
    else:
        feats = data
    x = np.array([_feature_array(f) for f in feats], dtype=np.float64).reshape(-1, N_FEATURES)
    y = np.array([int(v) for v in labels], dtype=np.int64)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InvalidInputError("need a non-empty list of (features, label) pairs")
    if np.any((y != 0) & (y != 1)):
        raise InvalidInputError("labels must be 0 (fast) or 1 (slow)")
    return x, y


DEFAULT_LINEAR_CONFIG = TrainConfig(learning_rate=0.5, epochs=400, batch_size=64, seed=0, init_scale=0.1)


def fit_linear(data, labels=None, config: TrainConfig = DEFAULT_LINEAR_CONFIG, tau: float = 0.5) -> LinearPolicy:
    """Logistic regression rescaled so its boundary is the routing rule at ``tau``.

    The model ``P(slow) = sigmoid(v . x + b)`` is fitted with a free
    intercept. When ``b < 0`` the weights ``w = v * tau / -b`` give
    ``w . x >= tau`` exactly where ``v . x + b >= 0``. Otherwise the
    boundary cannot be written without an intercept, and the fit is repeated
    with the offset pinned at ``-tau``. ``data`` is a list of
    ``(features, label)`` pairs, or features with ``labels`` passed
    separately (0 = fast, 1 = slow).
    """
    x, y = _training_arrays(data, labels)
    if np.all(y == y[0]):
        raise DegenerateLabelsError("linear fit needs both fast and slow labels")
    if not tau > 0:
        raise InvalidInputError("tau must be > 0 for a linear policy")
    v = _logistic_sgd(np.hstack([x, np.ones((x.shape[0], 1))]), y, config, offset=0.0)
    w, b = v[:N_FEATURES], v[N_FEATURES]
    if b < 0:
        return LinearPolicy(tuple(w * (tau / -b)))
    return LinearPolicy(tuple(_logistic_sgd(x, y, config, offset=-tau)))


def _logistic_sgd(x: np.ndarray, y: np.ndarray, config: TrainConfig, offset: float) -> np.ndarray:
    n, d = x.shape
    w = stream(config.seed, 0).uniform(-config.init_scale, config.init_scale, size=d)
    for epoch in range(config.epochs):
        order = stream(config.seed, 1, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            p = sigmoid(x[idx] @ w + offset)
            w = w - config.learning_rate * (x[idx].T @ (p - y[idx])) / idx.size
    return w


DEFAULT_NEURAL_CONFIG = TrainConfig(learning_rate=0.5, epochs=200, batch_size=32, seed=0, init_scale=0.5)


def fit_neural(
    data,
    labels=None,
    config: TrainConfig = DEFAULT_NEURAL_CONFIG,
    hidden: Sequence[int] = (8,),
) -> NeuralPolicy:
    """Sigmoid-output MLP trained with binary cross-entropy on fast/slow labels."""
    x, y = _training_arrays(data, labels)
    if np.all(y == y[0]):
        raise DegenerateLabelsError("neural fit needs both fast and slow labels")
    sizes = (N_FEATURES, *hidden, 1)
    net = MlpParams.init(sizes, config.seed, config.init_scale, "tanh", "sigmoid")
    net = mlp_train(net, SampleSet(x, y.astype(np.float64)), "binary_cross_entropy", config)
    return NeuralPolicy(net)


def _split_candidates(x: np.ndarray, y: np.ndarray):
    """Yield ``(f, threshold, left_sq_over_n_left + right_sq_over_n_right, counts)``.

    The score is the quantity a Gini split maximizes: ``n * gini_weighted =
    n - score``. Candidates come feature-major, thresholds ascending.
    """
    n = y.size
    total1 = int(y.sum())
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        cut = np.nonzero(xs[:-1] < xs[1:])[0]
        if cut.size == 0:
            continue
        n_left = cut + 1
        l1 = np.cumsum(ys)[cut]
        l0 = n_left - l1
        n_right = n - n_left
        r1 = total1 - l1
        r0 = n_right - r1
        s = (l0 * l0 + l1 * l1) / n_left + (r0 * r0 + r1 * r1) / n_right
        for k, i in enumerate(cut):
            a, b = xs[i], xs[i + 1]
            t = a + (b - a) / 2.0
            if not a < t <= b:
                t = b
            yield f, float(t), float(s[k]), (int(l0[k]), int(l1[k]), int(r0[k]), int(r1[k]))


def _best_split(x, y):
    cands = list(_split_candidates(x, y))
    if not cands:
        return None
    top = max(c[2] for c in cands)
    best, best_exact = None, None
    for f, t, s, (l0, l1, r0, r1) in cands:
        if s < top - 1e-9 * max(1.0, abs(top)):
            continue
        exact = Fraction(l0 * l0 + l1 * l1, l0 + l1) + Fraction(r0 * r0 + r1 * r1, r0 + r1)
        if best_exact is None or exact > best_exact:
            best, best_exact = (f, t), exact
    return best


def fit_tree(data, labels=None, max_depth: int = 3) -> TreePolicy:
    """Greedy CART with Gini impurity.

    Thresholds are midpoints between consecutive distinct feature values. Ties
    go to the lowest feature index, then the smallest threshold. An impure node
    is split whenever depth allows, even if the impurity does not drop. Leaves
    score the fraction of slow labels they hold.
    """
    x, y = _training_arrays(data, labels)
    if max_depth < 0:
        raise InvalidInputError("max_depth must be >= 0")

    def build(idx: np.ndarray, depth: int):
        yy = y[idx]
        leaf = Leaf(float(yy.sum()) / yy.size)
        if depth >= max_depth or yy.min() == yy.max():
            return leaf
        best = _best_split(x[idx], yy)
        if best is None:
            return leaf
        f, t = best
        go_left = x[idx, f] < t
        return Split(f, t, build(idx[go_left], depth + 1), build(idx[~go_left], depth + 1))

    return TreePolicy(build(np.arange(y.size), 0), max(max_depth, 0))


def training_accuracy(policy: Policy, data, labels=None, tau: float = 0.5) -> float:
    x, y = _training_arrays(data, labels)
    slow = score_batch(policy, x) >= tau
    return float(np.mean(slow == (y == 1)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _node_to_dict(node) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": node.score}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d) -> TreeNode:
    if not isinstance(d, dict):
        raise InvalidPolicyError("tree node must be an object")
    if "leaf" in d:
        return Leaf(float(d["leaf"]))
    try:
        return Split(int(d["feature"]), float(d["threshold"]),
                     _node_from_dict(d["left"]), _node_from_dict(d["right"]))
    except KeyError as exc:
        raise InvalidPolicyError(f"tree node missing {exc}") from exc


def policy_to_dict(policy: Policy) -> dict:
    kind = policy_kind(policy)
    if kind == "linear":
        params = {"weights": list(policy.weights)}
    elif kind == "neural":
        params = {"net": policy.net.to_dict()}
    else:
        params = {"max_depth": policy.max_depth, "root": _node_to_dict(policy.root)}
    return {"version": POLICY_FORMAT_VERSION, "kind": kind, "parameters": params}


def policy_from_dict(d: dict) -> Policy:
    if not isinstance(d, dict):
        raise InvalidPolicyError("policy document must be an object")
    if d.get("version") != POLICY_FORMAT_VERSION:
        raise InvalidPolicyError(f"unsupported policy format version {d.get('version')!r}")
    params = d.get("parameters")
    if not isinstance(params, dict):
        raise InvalidPolicyError("policy document lacks parameters")
    kind = d.get("kind")
    try:
        if kind == "linear":
            return LinearPolicy(tuple(params["weights"]))
        if kind == "neural":
            return NeuralPolicy(MlpParams.from_dict(params["net"]))
        if kind == "tree":
            return TreePolicy(_node_from_dict(params["root"]), int(params["max_depth"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidPolicyError(f"malformed {kind} policy: {exc}") from exc
    raise InvalidPolicyError(f"unknown policy kind {kind!r}")


def dumps_policy(policy: Policy) -> str:
    return json.dumps(policy_to_dict(policy), indent=2, sort_keys=True) + "\n"


def loads_policy(text: str) -> Policy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidPolicyError(f"policy file is not valid JSON: {exc}") from exc
    return policy_from_dict(doc)
