"""Query complexity features: correlation strength, domain crossing,
stakeholder multiplicity and uncertainty level."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cdr.errors import (
    CdrError,
    DegenerateTargetError,
    FeatureError,
    InvalidInputError,
)
from cdr.numeric import (
    PROB_TOL,
    DiscreteJoint,
    MlpParams,
    SampleSet,
    TrainConfig,
    as_vector,
    entropy,
    mi_exact,
    mlp_forward,
    mlp_train,
)
from cdr.rng import stream

FEATURE_NAMES = ("c_s", "d_c", "s_m", "u_l")

DEFAULT_MIN_CLUSTER_SIZE = 2
DEFAULT_MERGE_DISTANCE = 0.5


@dataclass(frozen=True, eq=False)
class QueryRecord:
    """One routable query.

    ``correlation_input`` is either a :class:`DiscreteJoint` (the correlation
    strength is computed exactly) or an embedding vector (it is predicted by a
    :class:`CorrelationModel`).
    """

    id: str
    concept_embeddings: np.ndarray
    stakeholder_count: int
    candidate_probs: np.ndarray
    correlation_input: DiscreteJoint | np.ndarray
    text: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise InvalidInputError("query id must be a non-empty string")
        emb = np.asarray(self.concept_embeddings, dtype=np.float64)
        if emb.size == 0:
            emb = emb.reshape(0, 0)
        elif emb.ndim != 2:
            raise InvalidInputError("concept_embeddings must be a list of equal-length vectors")
        if not np.all(np.isfinite(emb)):
            raise InvalidInputError("concept_embeddings contain non-finite values")
        if isinstance(self.stakeholder_count, bool) or int(self.stakeholder_count) != self.stakeholder_count:
            raise InvalidInputError("stakeholder_count must be an integer")
        if self.stakeholder_count < 0:
            raise InvalidInputError("stakeholder_count must be >= 0")
        probs = as_vector(self.candidate_probs, "candidate_probs")
        if probs.size == 0 or np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > PROB_TOL:
            raise InvalidInputError("candidate_probs must be a probability vector")
        corr = self.correlation_input
        if not isinstance(corr, DiscreteJoint):
            corr = as_vector(corr, "correlation embedding")
            corr.setflags(write=False)
        emb.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "concept_embeddings", emb)
        object.__setattr__(self, "stakeholder_count", int(self.stakeholder_count))
        object.__setattr__(self, "candidate_probs", probs)
        object.__setattr__(self, "correlation_input", corr)

    @property
    def concept_count(self) -> int:
        return self.concept_embeddings.shape[0]

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        a, b = self.correlation_input, other.correlation_input
        if isinstance(a, DiscreteJoint) != isinstance(b, DiscreteJoint):
            return False
        same_corr = a == b if isinstance(a, DiscreteJoint) else np.array_equal(a, b)
        return (
            self.id == other.id
            and self.stakeholder_count == other.stakeholder_count
            and self.text == other.text
            and np.array_equal(self.concept_embeddings, other.concept_embeddings)
            and np.array_equal(self.candidate_probs, other.candidate_probs)
            and bool(same_corr)
        )

    __hash__ = None


@dataclass(frozen=True)
class FeatureVector:
    c_s: float
    d_c: float
    s_m: float
    u_l: float

    def __post_init__(self):
        vals = (self.c_s, self.d_c, self.s_m, self.u_l)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("feature values must be finite")
        if not 0.0 <= self.c_s <= 1.0:
            raise InvalidInputError(f"c_s={self.c_s} outside [0, 1]")
        if not 0.0 < self.d_c <= 1.0:
            raise InvalidInputError(f"d_c={self.d_c} outside (0, 1]")
        if self.s_m < 0.0:
            raise InvalidInputError(f"s_m={self.s_m} is negative")
        if not 0.0 <= self.u_l < 1.0:
            raise InvalidInputError(f"u_l={self.u_l} outside [0, 1)")

    def as_array(self) -> np.ndarray:
        return np.array([self.c_s, self.d_c, self.s_m, self.u_l], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        c_s, d_c, s_m, u_l = (float(v) for v in values)
        return cls(c_s, d_c, s_m, u_l)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]
    cluster_count: int

    def __post_init__(self):
        if self.cluster_count < 1 or self.cluster_count > len(self.labels):
            raise InvalidInputError("cluster_count must lie in [1, number of concepts]")
        if set(self.labels) != set(range(self.cluster_count)):
            raise InvalidInputError("labels must cover 0..cluster_count-1")


# ---------------------------------------------------------------------------
# Correlation strength
# ---------------------------------------------------------------------------


def correlation_strength_exact(joint) -> float:
    """Normalized mutual information ``I(X;Y) / H(Y)``, clipped to [0, 1]."""
    j = joint if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint)
    h_y = entropy(j.py)
    if h_y <= 0.0:
        raise DegenerateTargetError("target variable has zero entropy")
    return min(1.0, max(0.0, mi_exact(j) / h_y))


def mixture_joint(weight: float, marginal) -> DiscreteJoint:
    """``weight * diag(q) + (1 - weight) * q q^T``: a copy channel blended with independence."""
    q = as_vector(marginal, "marginal")
    table = weight * np.diag(q) + (1.0 - weight) * np.outer(q, q)
    return DiscreteJoint(table / table.sum())


def _uniform_mixture_strength(weight: float, k: int) -> float:
    # closed form of correlation_strength_exact(mixture_joint(weight, uniform k))
    a = weight / k + (1.0 - weight) / (k * k)
    b = (1.0 - weight) / (k * k)
    mi = k * a * math.log(a * k * k) if a > 0 else 0.0
    if b > 0:
        mi += k * (k - 1) * b * math.log(b * k * k)
    return mi / math.log(k)


def joint_for_strength(target: float, n_states: int = 4, tol: float = 1e-12) -> DiscreteJoint:
    """Uniform-marginal mixture joint whose correlation strength equals ``target``.

    Strength is monotone in the mixture weight, so bisection suffices.
    """
    if not 0.0 <= target <= 1.0:
        raise InvalidInputError("target strength must lie in [0, 1]")
    if n_states < 2:
        raise InvalidInputError("need at least 2 states")
    q = np.full(n_states, 1.0 / n_states)
    if target <= 0.0:
        return mixture_joint(0.0, q)
    if target >= 1.0:
        return mixture_joint(1.0, q)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _uniform_mixture_strength(mid, n_states) < target:
            lo = mid
        else:
            hi = mid
    return mixture_joint(0.5 * (lo + hi), q)


@dataclass(frozen=True)
class CorrelationModel:
    """Regressor from a query embedding to a correlation strength in [0, 1]."""

    regressor: MlpParams

    def __post_init__(self):
        if self.regressor.n_outputs != 1:
            raise InvalidInputError("correlation regressor must have a single output")

    @property
    def input_dim(self) -> int:
        return self.regressor.n_inputs

    def to_dict(self) -> dict:
        return {"kind": "correlation_model", "regressor": self.regressor.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationModel":
        return cls(MlpParams.from_dict(d["regressor"]))


def correlation_strength_predict(model: CorrelationModel, embedding) -> float:
    emb = as_vector(embedding, "embedding")
    if emb.shape[0] != model.input_dim:
        raise InvalidInputError(
            f"embedding has dimension {emb.shape[0]}, model expects {model.input_dim}"
        )
    raw = float(mlp_forward(model.regressor, emb)[0])
    return min(1.0, max(0.0, raw))


def synthetic_correlation_pairs(n: int, seed: int, n_states: int = 4, dim: int = 8):
    """Embeddings of random joints labelled with their exact correlation strength.

    Each joint blends a copy channel with independence under a random
    marginal; its embedding is a fixed random projection of the flattened
    table. Returns ``(embeddings, labels, joints)``.
    """
    proj = stream(seed, 0).normal(0.0, 1.0, size=(n_states * n_states, dim)) * n_states
    embeddings = np.empty((n, dim))
    labels = np.empty(n)
    joints = []
    for i in range(n):
        g = stream(seed, 1, i)
        q = g.dirichlet(np.full(n_states, 2.0))
        joint = mixture_joint(float(g.uniform()), q)
        joints.append(joint)
        embeddings[i] = joint.probabilities.ravel() @ proj
        labels[i] = correlation_strength_exact(joint)
    return embeddings, labels, joints


def train_correlation_model(
    embeddings,
    labels,
    config: TrainConfig = TrainConfig(learning_rate=0.2, epochs=300, batch_size=16, seed=0),
    hidden: Sequence[int] = (16,),
) -> CorrelationModel:
    """Fit a sigmoid-output MLP on (embedding, strength) pairs by squared error."""
    data = SampleSet(np.asarray(embeddings, dtype=np.float64), np.asarray(labels, dtype=np.float64))
    sizes = (data.x.shape[1], *hidden, 1)
    params = MlpParams.init(sizes, config.seed, config.init_scale, "tanh", "sigmoid")
    return CorrelationModel(mlp_train(params, data, "squared_error", config))


# ---------------------------------------------------------------------------
# Domain crossing
# ---------------------------------------------------------------------------


def cluster_concepts(
    embeddings,
    min_cluster_size: int = DEFAULT_MIN_CLUSTER_SIZE,
    merge_distance: float = DEFAULT_MERGE_DISTANCE,
) -> ClusterAssignment:
    """Single-linkage agglomeration of concept embeddings.

    Pairs are merged in order of increasing Euclidean distance (ties broken by
    index) while the linkage distance is ``<= merge_distance``. Groups smaller
    than ``min_cluster_size`` are treated as noise and each of their members
    becomes its own cluster. Cluster ids are assigned in order of each
    cluster's lowest member index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.size == 0 or emb.ndim != 2 or emb.shape[0] == 0:
        raise InvalidInputError("need at least one concept embedding")
    if not np.all(np.isfinite(emb)):
        raise InvalidInputError("concept embeddings contain non-finite values")
    if min_cluster_size < 1:
        raise InvalidInputError("min_cluster_size must be >= 1")
    if not merge_distance > 0:
        raise InvalidInputError("merge_distance must be > 0")
    n = emb.shape[0]
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu, ju = np.triu_indices(n, k=1)
    d = dist[iu, ju]
    keep = d <= merge_distance
    iu, ju, d = iu[keep], ju[keep], d[keep]
    order = np.lexsort((ju, iu, d))

    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k in order:
        ra, rb = find(int(iu[k])), find(int(ju[k]))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    roots = [find(i) for i in range(n)]
    sizes: dict[int, int] = {}
    for r in roots:
        sizes[r] = sizes.get(r, 0) + 1
    labels = [0] * n
    ids: dict[int, int] = {}
    next_id = 0
    for i, r in enumerate(roots):
        if sizes[r] < min_cluster_size:
            labels[i] = next_id
            next_id += 1
            continue
        if r not in ids:
            ids[r] = next_id
            next_id += 1
        labels[i] = ids[r]
    return ClusterAssignment(tuple(labels), next_id)


def domain_crossing(assignment: ClusterAssignment, concept_count: int) -> float:
    if concept_count < 1 or concept_count != len(assignment.labels):
        raise InvalidInputError("concept_count must equal the number of clustered concepts")
    return assignment.cluster_count / concept_count


# ---------------------------------------------------------------------------
# Stakeholders and uncertainty
# ---------------------------------------------------------------------------


def stakeholder_multiplicity(count: int) -> float:
    if count < 0:
        raise InvalidInputError("stakeholder count must be >= 0")
    return math.log1p(count)


def uncertainty_level(candidate_probs) -> float:
    """One minus the probability of the most likely answer option."""
    p = as_vector(candidate_probs, "candidate_probs")
    if p.size == 0 or np.any(p < 0) or abs(float(p.sum()) - 1.0) > PROB_TOL:
        raise InvalidInputError("candidate_probs must be a probability vector")
    return max(0.0, 1.0 - float(np.max(p)))


@dataclass(frozen=True)
class ClusteringSettings:
    min_cluster_size: int = DEFAULT_MIN_CLUSTER_SIZE
    merge_distance: float = DEFAULT_MERGE_DISTANCE


def extract_features(
    query: QueryRecord,
    model: CorrelationModel | None = None,
    clustering: ClusteringSettings = ClusteringSettings(),
) -> FeatureVector:
    """Compute the four complexity features of ``query``.

    Raises:
        FeatureError: wraps the failure of an individual extractor, with
            ``dimension`` set to the feature name.
    """

    def tagged(name, fn, *args):
        try:
            return fn(*args)
        except CdrError as exc:
            raise FeatureError(name, exc) from exc

    corr = query.correlation_input
    if isinstance(corr, DiscreteJoint):
        c_s = tagged("c_s", correlation_strength_exact, corr)
    else:
        if model is None:
            raise FeatureError("c_s", InvalidInputError("embedding input requires a correlation model"))
        c_s = tagged("c_s", correlation_strength_predict, model, corr)

    def _dc():
        assignment = cluster_concepts(
            query.concept_embeddings, clustering.min_cluster_size, clustering.merge_distance
        )
        return domain_crossing(assignment, query.concept_count)

    d_c = tagged("d_c", _dc)
    s_m = tagged("s_m", stakeholder_multiplicity, query.stakeholder_count)
    u_l = tagged("u_l", uncertainty_level, query.candidate_probs)
    return FeatureVector(c_s, d_c, s_m, u_l)
