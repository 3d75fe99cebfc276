"""Simulated fast and slow reasoning engines and the retrospective oracle.

Accuracy is a piecewise-linear function of a query's latent complexity ``z``;
token and latency costs are truncated normals. The default profiles reproduce
the reported per-query cost of direct generation (145 +/- 23 tokens,
1.2 +/- 0.3 s) and of deliberate multi-step reasoning (342 +/- 45 tokens,
3.8 +/- 0.7 s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cdr.errors import InvalidInputError
from cdr.features import QueryRecord
from cdr.routing import Strategy

SLOW_STAGES = ("decomposition", "dimension_evaluation", "synthesis", "confidence_estimation")
MIN_LATENCY_S = 1e-3
CONFIDENCE_NOISE = 0.1


@dataclass(frozen=True)
class EngineProfile:
    kind: Strategy
    accuracy_points: tuple[tuple[float, float], ...]
    token_mean: float
    token_std: float
    latency_mean: float
    latency_std: float
    stage_fractions: tuple[float, ...] | None = None

    def __post_init__(self):
        kind = Strategy(self.kind)
        pts = tuple((float(z), float(a)) for z, a in self.accuracy_points)
        if not pts:
            raise InvalidInputError("accuracy curve needs at least one control point")
        zs = [z for z, _ in pts]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise InvalidInputError("accuracy control points must have increasing z")
        if any(not 0.0 <= a <= 1.0 for _, a in pts):
            raise InvalidInputError("accuracy values must lie in [0, 1]")
        if not self.token_mean > 0 or self.token_std < 0:
            raise InvalidInputError("token mean must be > 0 and std >= 0")
        if not self.latency_mean > 0 or self.latency_std < 0:
            raise InvalidInputError("latency mean must be > 0 and std >= 0")
        fractions = self.stage_fractions
        if kind is Strategy.SLOW:
            if fractions is None:
                fractions = DEFAULT_STAGE_FRACTIONS
            fractions = tuple(float(f) for f in fractions)
            if len(fractions) != len(SLOW_STAGES) or any(f < 0 for f in fractions):
                raise InvalidInputError("slow profile needs 4 non-negative stage fractions")
            if abs(math.fsum(fractions) - 1.0) > 1e-9:
                raise InvalidInputError("stage fractions must sum to 1")
        elif fractions is not None:
            raise InvalidInputError("only the slow profile has stage fractions")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "accuracy_points", pts)
        object.__setattr__(self, "stage_fractions", fractions)

    def accuracy(self, z: float) -> float:
        zs = [p[0] for p in self.accuracy_points]
        acc = [p[1] for p in self.accuracy_points]
        return float(np.interp(z, zs, acc))


DEFAULT_STAGE_FRACTIONS = (0.15, 0.45, 0.25, 0.15)

FAST_DEFAULT = EngineProfile(
    Strategy.FAST,
    ((0.0, 0.87), (0.4, 0.78), (1.0, 0.25)),
    token_mean=145.0, token_std=23.0, latency_mean=1.2, latency_std=0.3,
)
SLOW_DEFAULT = EngineProfile(
    Strategy.SLOW,
    ((0.0, 0.85), (0.4, 0.79), (1.0, 0.68)),
    token_mean=342.0, token_std=45.0, latency_mean=3.8, latency_std=0.7,
    stage_fractions=DEFAULT_STAGE_FRACTIONS,
)


@dataclass
class SimulatedQuery:
    record: QueryRecord
    latent_complexity: float
    n_options: int = 4
    category: str = "factual"
    oracle_label: Strategy | None = None

    def __post_init__(self):
        if not 0.0 <= self.latent_complexity <= 1.0:
            raise InvalidInputError("latent complexity must lie in [0, 1]")
        if self.n_options < 2:
            raise InvalidInputError("a simulated query needs at least 2 answer options")
        if self.oracle_label is not None:
            self.oracle_label = Strategy(self.oracle_label)

    @property
    def id(self) -> str:
        return self.record.id


@dataclass(frozen=True)
class EngineResponse:
    """One engine run. ``answer`` 0 is the correct option."""

    correct: bool
    answer: int
    tokens: int
    latency_s: float
    confidence: float
    stage_trace: tuple[int, ...] | None = None


@dataclass(frozen=True)
class UtilityConfig:
    lambda_cost: float = 0.1

    def __post_init__(self):
        if not self.lambda_cost >= 0:
            raise InvalidInputError("lambda_cost must be >= 0")


def split_stages(tokens: int, fractions) -> tuple[int, ...]:
    """Largest-remainder split of ``tokens`` by stage fractions; sums to ``tokens``."""
    raw = [tokens * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    short = tokens - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return tuple(counts)


def respond(profile: EngineProfile, query: SimulatedQuery, rng: np.random.Generator) -> EngineResponse:
    """Sample one engine run.

    Draws, in fixed order: correctness, wrong-answer id, token count, latency
    and confidence noise. All five are drawn every time so the stream position
    never depends on earlier outcomes.
    """
    acc = profile.accuracy(query.latent_complexity)
    u_correct = rng.random()
    wrong = 1 + int(rng.integers(0, query.n_options - 1))
    tok = rng.normal(profile.token_mean, profile.token_std)
    lat = rng.normal(profile.latency_mean, profile.latency_std)
    noise = rng.uniform(-CONFIDENCE_NOISE, CONFIDENCE_NOISE)
    correct = bool(u_correct < acc)
    tokens = int(round(max(1.0, tok)))
    trace = split_stages(tokens, profile.stage_fractions) if profile.kind is Strategy.SLOW else None
    return EngineResponse(
        correct=correct,
        answer=0 if correct else wrong,
        tokens=tokens,
        latency_s=float(max(MIN_LATENCY_S, lat)),
        confidence=float(min(1.0, max(0.0, acc + noise))),
        stage_trace=trace,
    )


def utility(profile: EngineProfile, z: float, util: UtilityConfig) -> float:
    """Expected accuracy minus ``lambda`` per thousand expected tokens."""
    return profile.accuracy(z) - util.lambda_cost * profile.token_mean / 1000.0


def oracle_best_strategy(
    query: SimulatedQuery,
    fast: EngineProfile = FAST_DEFAULT,
    slow: EngineProfile = SLOW_DEFAULT,
    util: UtilityConfig = UtilityConfig(),
) -> Strategy:
    z = query.latent_complexity
    return Strategy.SLOW if utility(slow, z, util) > utility(fast, z, util) else Strategy.FAST


@dataclass(frozen=True)
class EngineSet:
    fast: EngineProfile = FAST_DEFAULT
    slow: EngineProfile = SLOW_DEFAULT
    utility: UtilityConfig = field(default_factory=UtilityConfig)

    def __post_init__(self):
        if self.fast.kind is not Strategy.FAST or self.slow.kind is not Strategy.SLOW:
            raise InvalidInputError("engine set needs a fast and a slow profile")

    def profile(self, strategy: Strategy) -> EngineProfile:
        return self.fast if Strategy(strategy) is Strategy.FAST else self.slow
