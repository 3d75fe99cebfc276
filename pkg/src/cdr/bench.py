"""Desk-scale evaluation harness.

Generates a synthetic query corpus, runs every routing baseline against the
same simulated engine draws (a paired design: engine randomness is keyed by
query id and repeat, never by baseline) and aggregates accuracy, consistency,
cost, calibration and routing agreement with the retrospective oracle.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from cdr.engines import (
    EngineSet,
    SimulatedQuery,
    oracle_best_strategy,
    respond,
)
from cdr.errors import InsufficientEvidenceError, InvalidInputError
from cdr.features import (
    ClusteringSettings,
    CorrelationModel,
    QueryRecord,
    extract_features,
    joint_for_strength,
)
from cdr.rng import key_of, stream
from cdr.routing import (
    Outcome,
    Policy,
    RoutingDecision,
    Strategy,
    ThresholdState,
    fit_linear,
    fit_neural,
    fit_tree,
    record_outcome,
    score_batch,
    update_threshold,
)

log = logging.getLogger(__name__)

CATEGORIES = (
    "professional_judgment",
    "cross_domain",
    "correlation_prediction",
    "multi_stakeholder",
    "factual",
)

# latent complexity z = lo + (hi - lo) * Beta(a, b); stakeholders ~ Poisson(base + slope * z)
CATEGORY_MODELS = {
    "professional_judgment": dict(z=(0.3, 1.0), beta=(3.0, 2.0), stakeholders=(2.0, 4.0)),
    "cross_domain": dict(z=(0.2, 1.0), beta=(2.0, 2.0), stakeholders=(0.5, 2.0)),
    "correlation_prediction": dict(z=(0.1, 0.9), beta=(2.0, 2.0), stakeholders=(0.5, 1.5)),
    "multi_stakeholder": dict(z=(0.1, 0.9), beta=(2.0, 2.0), stakeholders=(3.0, 5.0)),
    "factual": dict(z=(0.0, 0.35), beta=(2.0, 3.0), stakeholders=(0.0, 1.0)),
}

DEFAULT_MIX = {
    "professional_judgment": 0.125,
    "cross_domain": 0.125,
    "correlation_prediction": 0.125,
    "multi_stakeholder": 0.125,
    "factual": 0.5,
}

BASELINES = (
    "uniform_fast",
    "uniform_slow",
    "random",
    "confidence_based",
    "length_based",
    "cdr_linear",
    "cdr_neural",
    "cdr_tree",
)

PAPER_ROUTING_REFERENCE = {"routing_accuracy": 0.873, "false_positive_rate": 0.082, "false_negative_rate": 0.045}

EMBEDDING_DIM = 16
CONCEPT_JITTER = 0.03
MAX_UNCERTAINTY = 0.75

# stream key prefixes
_K_ORDER, _K_QUERY, _K_ENGINE, _K_ROUTE, _K_EXPLORE, _K_BOOT = range(6)


@dataclass(frozen=True)
class CorpusSpec:
    n_queries: int = 2000
    seed: int = 42
    category_mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    noise_scale: float = 0.1
    n_options: int = 4

    def __post_init__(self):
        if self.n_queries < 1:
            raise InvalidInputError("n_queries must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")
        unknown = set(self.category_mix) - set(CATEGORIES)
        if unknown:
            raise InvalidInputError(f"category_mix: unknown categories {sorted(unknown)}")
        if any(v < 0 for v in self.category_mix.values()):
            raise InvalidInputError("category_mix: proportions must be non-negative")
        total = math.fsum(self.category_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"category_mix: proportions sum to {total!r}, not 1")
        if self.noise_scale < 0:
            raise InvalidInputError("noise_scale must be >= 0")
        if self.n_options < 2:
            raise InvalidInputError("n_options must be >= 2")


def allocate(n: int, mix: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` queries to categories."""
    raw = {c: n * mix.get(c, 0.0) for c in CATEGORIES}
    counts = {c: int(math.floor(v)) for c, v in raw.items()}
    short = n - sum(counts.values())
    order = sorted(CATEGORIES, key=lambda c: (-(raw[c] - counts[c]), CATEGORIES.index(c)))
    for c in order[:short]:
        counts[c] += 1
    return counts


def _concepts(g: np.random.Generator, n_concepts: int, n_clusters: int) -> np.ndarray:
    assign = np.concatenate([np.arange(n_clusters), g.integers(0, n_clusters, n_concepts - n_clusters)])
    axes = g.permutation(EMBEDDING_DIM)[:n_clusters]
    emb = np.zeros((n_concepts, EMBEDDING_DIM))
    emb[np.arange(n_concepts), axes[assign]] = 1.0
    emb += g.normal(0.0, CONCEPT_JITTER, size=emb.shape)
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def _query(spec: CorpusSpec, qid: str, category: str, g: np.random.Generator, engines: EngineSet) -> SimulatedQuery:
    model = CATEGORY_MODELS[category]
    lo, hi = model["z"]
    z = float(lo + (hi - lo) * g.beta(*model["beta"]))
    noise = g.normal(0.0, 1.0, size=3) * spec.noise_scale

    c_s = float(np.clip(1.0 - z + noise[0], 0.0, 1.0))
    joint = joint_for_strength(c_s)

    n_concepts = int(g.integers(3, 11))
    d_target = float(np.clip(0.1 + 0.8 * z + noise[1], 0.0, 1.0))
    n_clusters = int(np.clip(round(d_target * n_concepts), 1, n_concepts))
    emb = _concepts(g, n_concepts, n_clusters)

    base, slope = model["stakeholders"]
    stakeholders = int(g.poisson(base + slope * z))

    u = float(np.clip(MAX_UNCERTAINTY * z + noise[2], 0.0, MAX_UNCERTAINTY))
    probs = np.full(spec.n_options, u / (spec.n_options - 1))
    probs[0] = 1.0 - u
    probs = probs[g.permutation(spec.n_options)]

    record = QueryRecord(qid, emb, stakeholders, probs, joint, text=f"{category} query {qid}")
    q = SimulatedQuery(record, z, spec.n_options, category)
    q.oracle_label = oracle_best_strategy(q, engines.fast, engines.slow, engines.utility)
    return q


def generate_corpus(spec: CorpusSpec, engines: EngineSet = EngineSet(), split: int = 0) -> list[SimulatedQuery]:
    """Synthetic queries whose features track a hidden complexity ``z``.

    ``split`` selects an independent corpus from the same seed (0 for
    evaluation, 1 for policy training). Oracle labels are filled in from the
    engine profiles.
    """
    counts = allocate(spec.n_queries, spec.category_mix)
    cats = [c for c in CATEGORIES for _ in range(counts[c])]
    order = stream(spec.seed, split, _K_ORDER).permutation(len(cats))
    prefix = "q" if split == 0 else f"s{split}-"
    corpus = []
    for i, j in enumerate(order):
        g = stream(spec.seed, split, _K_QUERY, i)
        corpus.append(_query(spec, f"{prefix}{i:05d}", cats[j], g, engines))
    return corpus


def corpus_features(
    corpus: Sequence[SimulatedQuery],
    model: CorrelationModel | None = None,
    clustering: ClusteringSettings = ClusteringSettings(),
) -> np.ndarray:
    return np.array([extract_features(q.record, model, clustering).as_array() for q in corpus]).reshape(-1, 4)


def oracle_labels(corpus: Sequence[SimulatedQuery]) -> np.ndarray:
    return np.array([1 if q.oracle_label is Strategy.SLOW else 0 for q in corpus], dtype=np.int64)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float
    consistency: float | None
    mean_tokens: float
    mean_latency_s: float
    ece: float
    fast_fraction: float


def consistency(answers: Sequence[Sequence]) -> float:
    """Mean over queries of the fraction of agreeing run pairs.

    For one query with ``r`` runs, agreement is ``sum_a C(count_a, 2) / C(r, 2)``.
    """
    if len(answers) == 0:
        raise InvalidInputError("no queries given")
    per_query = []
    for runs in answers:
        r = len(runs)
        if r < 2:
            raise InvalidInputError("consistency needs at least 2 runs per query")
        agree = sum(math.comb(c, 2) for c in Counter(runs).values())
        per_query.append(Fraction(agree, math.comb(r, 2)))
    return float(sum(per_query, Fraction(0)) / len(per_query))


def _consistency_rows(answers: np.ndarray) -> np.ndarray:
    """Per-query agreement for an integer ``(n, repeats)`` array."""
    n, r = answers.shape
    srt = np.sort(answers, axis=1)
    agree = np.zeros(n)
    # count equal pairs via run lengths of the sorted rows
    start = np.ones((n, r), dtype=bool)
    start[:, 1:] = srt[:, 1:] != srt[:, :-1]
    for i in range(n):
        bounds = np.flatnonzero(np.append(start[i], True))
        lengths = np.diff(bounds)
        agree[i] = np.sum(lengths * (lengths - 1) // 2)
    return agree / math.comb(r, 2)


def calibration_ece(confidences, correct, bins: int = 10) -> float:
    """Expected calibration error over ``bins`` equal-width bins on [0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.shape != hit.shape:
        raise InvalidInputError("confidences and correct must have equal length")
    if bins < 1:
        raise InvalidInputError("bins must be >= 1")
    if conf.size == 0:
        raise InvalidInputError("no predictions given")
    if np.any((conf < 0) | (conf > 1)):
        raise InvalidInputError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    n = conf.size
    gaps = []
    for b in range(bins):
        mask = idx == b
        k = int(mask.sum())
        if k:
            gap = abs(math.fsum(conf[mask]) / k - math.fsum(hit[mask]) / k)
            gaps.append(k / n * gap)
    return math.fsum(gaps)


@dataclass(frozen=True)
class ConfusionReport:
    """Routing agreement with the oracle, kept as exact counts.

    A false positive is an unnecessary slow route; a false negative is a
    missed slow route.
    """

    n: int
    n_match: int
    n_false_positive: int
    n_false_negative: int
    by_category: Mapping[str, "ConfusionReport"] = field(default_factory=dict)

    @property
    def routing_accuracy(self) -> float:
        return self.n_match / self.n

    @property
    def false_positive_rate(self) -> float:
        return self.n_false_positive / self.n

    @property
    def false_negative_rate(self) -> float:
        return self.n_false_negative / self.n

    def fractions(self) -> tuple[Fraction, Fraction, Fraction]:
        return (Fraction(self.n_match, self.n), Fraction(self.n_false_positive, self.n),
                Fraction(self.n_false_negative, self.n))


def _strategy(v) -> Strategy:
    if isinstance(v, RoutingDecision):
        return v.strategy
    return Strategy(v)


def routing_confusion(decisions, oracle_labels, categories: Sequence[str] | None = None) -> ConfusionReport:
    """Compare routed strategies with oracle labels.

    ``decisions`` may hold :class:`RoutingDecision` objects or bare strategies.
    """
    decisions = [_strategy(d) for d in decisions]
    labels = [_strategy(v) for v in oracle_labels]
    if len(decisions) != len(labels):
        raise InvalidInputError("decisions and oracle labels differ in length")
    if not decisions:
        raise InvalidInputError("no decisions given")
    if categories is not None and len(categories) != len(decisions):
        raise InvalidInputError("categories must align with decisions")

    def tally(pairs):
        pairs = list(pairs)
        fp = sum(1 for d, o in pairs if d is Strategy.SLOW and o is Strategy.FAST)
        fn = sum(1 for d, o in pairs if d is Strategy.FAST and o is Strategy.SLOW)
        return len(pairs), len(pairs) - fp - fn, fp, fn

    by_cat = {}
    if categories is not None:
        for c in sorted(set(categories)):
            sel = [(d, o) for d, o, cc in zip(decisions, labels, categories) if cc == c]
            by_cat[c] = ConfusionReport(*tally(sel))
    return ConfusionReport(*tally(zip(decisions, labels)), by_category=by_cat)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdSettings:
    tau0: float = 0.5
    alpha: float = 0.01
    window: int = 100
    tau_min: float = 0.05
    tau_max: float = 0.95
    epsilon: float = 0.1
    adapt: bool = False

    def new_state(self) -> ThresholdState:
        return ThresholdState(self.tau0, self.alpha, self.window, self.tau_min, self.tau_max)


@dataclass
class EngineDraws:
    """Responses of both engines for every (query, repeat); index 0 fast, 1 slow."""

    correct: np.ndarray
    answer: np.ndarray
    tokens: np.ndarray
    latency: np.ndarray
    confidence: np.ndarray


def draw_engines(corpus: Sequence[SimulatedQuery], engines: EngineSet, repeats: int, seed: int) -> EngineDraws:
    n = len(corpus)
    shape = (2, n, repeats)
    out = EngineDraws(
        np.zeros(shape, dtype=bool), np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64),
        np.zeros(shape), np.zeros(shape),
    )
    for i, q in enumerate(corpus):
        qk = key_of(q.id)
        for r in range(repeats):
            for k, profile in enumerate((engines.fast, engines.slow)):
                resp = respond(profile, q, stream(seed, _K_ENGINE, qk, r, k))
                out.correct[k, i, r] = resp.correct
                out.answer[k, i, r] = resp.answer
                out.tokens[k, i, r] = resp.tokens
                out.latency[k, i, r] = resp.latency_s
                out.confidence[k, i, r] = resp.confidence
    return out


@dataclass
class BaselineRun:
    """Per-(query, repeat) results of one baseline."""

    baseline: str
    slow: np.ndarray
    correct: np.ndarray
    answer: np.ndarray
    tokens: np.ndarray
    latency: np.ndarray
    confidence: np.ndarray
    tau_trace: np.ndarray | None = None

    def metrics(self, ece_bins: int = 10) -> RunMetrics:
        r = self.answer.shape[1]
        cons = float(np.mean(_consistency_rows(self.answer))) if r >= 2 else None
        return RunMetrics(
            accuracy=float(np.mean(self.correct)),
            consistency=cons,
            mean_tokens=float(np.mean(self.tokens)),
            mean_latency_s=float(np.mean(self.latency)),
            ece=calibration_ece(self.confidence, self.correct, ece_bins),
            fast_fraction=float(np.mean(~self.slow)),
        )


def _select(draws: EngineDraws, slow: np.ndarray, name: str) -> BaselineRun:
    pick = slow.astype(np.int64)[None]
    take = lambda a: np.take_along_axis(a, pick, axis=0)[0]
    return BaselineRun(name, slow, take(draws.correct), take(draws.answer), take(draws.tokens).astype(np.float64),
                       take(draws.latency), take(draws.confidence))


def _adaptive_run(name, corpus, scores, draws, settings: ThresholdSettings, seed) -> BaselineRun:
    n, repeats = draws.correct.shape[1:]
    slow = np.zeros((n, repeats), dtype=bool)
    explore = np.zeros((n, repeats), dtype=bool)
    trace = np.zeros((repeats, n))
    keys = [key_of(q.id) for q in corpus]
    for r in range(repeats):
        state = settings.new_state()
        for i in range(n):
            trace[r, i] = state.tau
            chosen = Strategy.FAST if scores[i] < state.tau else Strategy.SLOW
            k = 1 if chosen is Strategy.SLOW else 0
            slow[i, r] = bool(k)
            explore[i, r] = stream(seed, _K_EXPLORE, keys[i], r).random() < settings.epsilon
            cf = bool(draws.correct[1 - k, i, r]) if explore[i, r] else None
            record_outcome(state, Outcome(chosen, bool(draws.correct[k, i, r]), cf))
            try:
                update_threshold(state)
            except InsufficientEvidenceError:
                pass
    run = _select(draws, slow, name)
    # exploration runs the other engine as well
    other = np.take_along_axis(draws.tokens, (~slow).astype(np.int64)[None], axis=0)[0]
    other_lat = np.take_along_axis(draws.latency, (~slow).astype(np.int64)[None], axis=0)[0]
    run.tokens = run.tokens + np.where(explore, other, 0)
    run.latency = run.latency + np.where(explore, other_lat, 0.0)
    run.tau_trace = trace
    return run


def simulate_baseline(
    corpus: Sequence[SimulatedQuery],
    baseline: str,
    draws: EngineDraws,
    seed: int,
    policies: Mapping[str, Policy] | None = None,
    features: np.ndarray | None = None,
    threshold: ThresholdSettings = ThresholdSettings(),
    confidence_threshold: float = 0.7,
) -> BaselineRun:
    n, repeats = draws.correct.shape[1:]
    if baseline == "uniform_fast":
        return _select(draws, np.zeros((n, repeats), dtype=bool), baseline)
    if baseline == "uniform_slow":
        return _select(draws, np.ones((n, repeats), dtype=bool), baseline)
    if baseline == "random":
        slow = np.array([[stream(seed, _K_ROUTE, key_of(q.id), r).random() < 0.5 for r in range(repeats)]
                         for q in corpus], dtype=bool).reshape(n, repeats)
        return _select(draws, slow, baseline)
    if baseline == "length_based":
        lengths = np.array([q.record.concept_count for q in corpus])
        slow = np.repeat((lengths > np.median(lengths))[:, None], repeats, axis=1)
        return _select(draws, slow, baseline)
    if baseline == "confidence_based":
        # cascade: the fast answer's confidence decides whether to escalate
        slow = draws.confidence[0] < confidence_threshold
        run = _select(draws, slow, baseline)
        run.tokens = run.tokens + np.where(slow, draws.tokens[0], 0)
        run.latency = run.latency + np.where(slow, draws.latency[0], 0.0)
        return run
    if baseline.startswith("cdr_"):
        kind = baseline[4:]
        if not policies or kind not in policies:
            raise InvalidInputError(f"baseline {baseline} needs a trained {kind} policy")
        if features is None:
            features = corpus_features(corpus)
        scores = score_batch(policies[kind], features)
        if threshold.adapt:
            return _adaptive_run(baseline, corpus, scores, draws, threshold, seed)
        slow = np.repeat((scores >= threshold.tau0)[:, None], repeats, axis=1)
        return _select(draws, slow, baseline)
    raise InvalidInputError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")


def run_baseline(
    corpus: Sequence[SimulatedQuery],
    baseline: str,
    engines: EngineSet = EngineSet(),
    repeats: int = 10,
    seed: int = 42,
    policies: Mapping[str, Policy] | None = None,
    threshold: ThresholdSettings = ThresholdSettings(),
    ece_bins: int = 10,
    confidence_threshold: float = 0.7,
) -> RunMetrics:
    """Run one baseline for ``repeats`` seeded passes and aggregate its metrics."""
    if baseline not in BASELINES:
        raise InvalidInputError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    draws = draw_engines(corpus, engines, repeats, seed)
    feats = corpus_features(corpus) if baseline.startswith("cdr_") else None
    run = simulate_baseline(corpus, baseline, draws, seed, policies, feats, threshold, confidence_threshold)
    return run.metrics(ece_bins)


# ---------------------------------------------------------------------------
# Comparison table
# ---------------------------------------------------------------------------


@dataclass
class BaselineRow:
    baseline: str
    accuracy: float
    accuracy_ci_low: float
    accuracy_ci_high: float
    consistency: float | None
    mean_tokens: float
    tokens_ci_low: float
    tokens_ci_high: float
    mean_latency_s: float
    ece: float
    fast_fraction: float
    routing_accuracy: float
    false_positive_rate: float
    false_negative_rate: float
    token_savings_vs_uniform_slow: float | None = None
    savings_ci_low: float | None = None
    savings_ci_high: float | None = None
    acc_gain_vs_uniform_fast: float | None = None
    gain_fast_ci_low: float | None = None
    gain_fast_ci_high: float | None = None
    acc_gain_vs_uniform_slow: float | None = None
    gain_slow_ci_low: float | None = None
    gain_slow_ci_high: float | None = None


METRIC_COLUMNS = tuple(f.name for f in fields(BaselineRow))


@dataclass
class BenchmarkReport:
    rows: list[BaselineRow]
    confusion: dict[str, ConfusionReport]
    runs: dict[str, BaselineRun] = field(default_factory=dict, repr=False)

    def row(self, baseline: str) -> BaselineRow:
        for r in self.rows:
            if r.baseline == baseline:
                return r
        raise KeyError(baseline)

    def metrics_csv(self) -> str:
        return write_metrics_csv(self.rows)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["baseline", "category", "n", "routing_accuracy", "false_positive_rate", "false_negative_rate"])
        for name, rep in self.confusion.items():
            for cat, sub in [("all", rep), *rep.by_category.items()]:
                w.writerow([name, cat, sub.n, repr(sub.routing_accuracy), repr(sub.false_positive_rate),
                            repr(sub.false_negative_rate)])
        ref = PAPER_ROUTING_REFERENCE
        w.writerow(["reference", "all", "", repr(ref["routing_accuracy"]), repr(ref["false_positive_rate"]),
                    repr(ref["false_negative_rate"])])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: Sequence[BaselineRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        d = asdict(row)
        w.writerow([_fmt(d[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[BaselineRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        kwargs = {}
        for c in METRIC_COLUMNS:
            v = rec.get(c, "")
            kwargs[c] = v if c == "baseline" else (float(v) if v not in ("", None) else None)
        rows.append(BaselineRow(**kwargs))
    return rows


def bootstrap_means(values: np.ndarray, n_resamples: int, seed: int, chunk: int = 500) -> np.ndarray:
    """Means of ``values`` (``(n, m)``) over query-level bootstrap resamples.

    Every column is resampled with the same query indices, which keeps
    comparisons between columns paired. Returns ``(n_resamples, m)``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    out = np.empty((n_resamples, values.shape[1]))
    for c, start in enumerate(range(0, n_resamples, chunk)):
        b = min(chunk, n_resamples - start)
        idx = stream(seed, _K_BOOT, c).integers(0, n, size=(b, n))
        flat = (idx + np.arange(b)[:, None] * n).ravel()
        counts = np.bincount(flat, minlength=b * n).reshape(b, n).astype(np.float64)
        out[start:start + b] = counts @ values / n
    return out


def _ci(samples: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(samples, [2.5, 97.5])
    return float(lo), float(hi)


def compare_all(
    corpus: Sequence[SimulatedQuery],
    engines: EngineSet = EngineSet(),
    policies: Mapping[str, Policy] | None = None,
    repeats: int = 10,
    seed: int = 42,
    baselines: Sequence[str] | None = None,
    threshold: ThresholdSettings = ThresholdSettings(),
    n_resamples: int = 10_000,
    ece_bins: int = 10,
    confidence_threshold: float = 0.7,
    features: np.ndarray | None = None,
) -> BenchmarkReport:
    """Run every baseline on one corpus with shared engine draws.

    CDR baselines are included for each policy kind present in ``policies``.
    Confidence intervals are 95% percentile intervals from a paired bootstrap
    over queries.
    """
    policies = dict(policies or {})
    if baselines is None:
        baselines = [b for b in BASELINES if not b.startswith("cdr_") or b[4:] in policies]
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    if any(b.startswith("cdr_") for b in baselines) and features is None:
        features = corpus_features(corpus)
    draws = draw_engines(corpus, engines, repeats, seed)
    labels = [q.oracle_label for q in corpus]
    cats = [q.category for q in corpus]

    runs, confusion = {}, {}
    for b in baselines:
        run = simulate_baseline(corpus, b, draws, seed, policies, features, threshold, confidence_threshold)
        runs[b] = run
        decisions = [Strategy.SLOW if s else Strategy.FAST for s in run.slow.T.ravel()]
        confusion[b] = routing_confusion(decisions, labels * repeats, cats * repeats)
        log.info("ran %s", b)

    # per-query columns: accuracy then tokens for each baseline
    cols = np.column_stack([np.column_stack([runs[b].correct.mean(axis=1), runs[b].tokens.mean(axis=1)])
                            for b in baselines])
    boot = bootstrap_means(cols, n_resamples, seed)
    col = {b: 2 * i for i, b in enumerate(baselines)}

    rows = []
    for b in baselines:
        m = runs[b].metrics(ece_bins)
        cf = confusion[b]
        acc_s, tok_s = boot[:, col[b]], boot[:, col[b] + 1]
        row = BaselineRow(
            b, m.accuracy, *_ci(acc_s), m.consistency, m.mean_tokens, *_ci(tok_s), m.mean_latency_s, m.ece,
            m.fast_fraction, cf.routing_accuracy, cf.false_positive_rate, cf.false_negative_rate,
        )
        if "uniform_slow" in runs:
            ref_tok = runs["uniform_slow"].tokens.mean()
            row.token_savings_vs_uniform_slow = float(1.0 - m.mean_tokens / ref_tok)
            row.savings_ci_low, row.savings_ci_high = _ci(1.0 - tok_s / boot[:, col["uniform_slow"] + 1])
            row.acc_gain_vs_uniform_slow = float(m.accuracy - runs["uniform_slow"].correct.mean())
            row.gain_slow_ci_low, row.gain_slow_ci_high = _ci(acc_s - boot[:, col["uniform_slow"]])
        if "uniform_fast" in runs:
            row.acc_gain_vs_uniform_fast = float(m.accuracy - runs["uniform_fast"].correct.mean())
            row.gain_fast_ci_low, row.gain_fast_ci_high = _ci(acc_s - boot[:, col["uniform_fast"]])
        rows.append(row)
    return BenchmarkReport(rows, confusion, runs)


# ---------------------------------------------------------------------------
# Policy training on a corpus
# ---------------------------------------------------------------------------


def train_policies(
    corpus: Sequence[SimulatedQuery],
    kinds: Iterable[str] = ("linear", "neural", "tree"),
    features: np.ndarray | None = None,
    linear_config=None,
    neural_config=None,
    hidden: Sequence[int] = (8,),
    max_depth: int = 4,
) -> dict[str, Policy]:
    """Fit one policy per kind on the corpus' oracle labels."""
    x = corpus_features(corpus) if features is None else features
    y = oracle_labels(corpus)
    out: dict[str, Policy] = {}
    for kind in kinds:
        if kind == "linear":
            out[kind] = fit_linear(x, y, linear_config) if linear_config else fit_linear(x, y)
        elif kind == "neural":
            out[kind] = fit_neural(x, y, neural_config, hidden) if neural_config else fit_neural(x, y, hidden=hidden)
        elif kind == "tree":
            out[kind] = fit_tree(x, y, max_depth)
        else:
            raise InvalidInputError(f"unknown policy kind {kind!r}")
    return out
