"""File formats: line-delimited JSON for queries, corpora and decisions, and the
YAML run configuration."""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from cdr.bench import BASELINES, CATEGORIES, DEFAULT_MIX, CorpusSpec, ThresholdSettings
from cdr.engines import FAST_DEFAULT, SLOW_DEFAULT, EngineProfile, EngineSet, SimulatedQuery, UtilityConfig
from cdr.errors import ConfigError, InvalidInputError
from cdr.features import ClusteringSettings, FeatureVector, QueryRecord
from cdr.numeric import DiscreteJoint, TrainConfig
from cdr.routing import RoutingDecision, Strategy

MANIFEST_VERSION = 1


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


def query_to_dict(q: QueryRecord) -> dict:
    corr = q.correlation_input
    if isinstance(corr, DiscreteJoint):
        correlation = {"joint": corr.probabilities.tolist()}
    else:
        correlation = {"embedding": corr.tolist()}
    d = {
        "id": q.id,
        "concept_embeddings": q.concept_embeddings.tolist(),
        "stakeholder_count": q.stakeholder_count,
        "candidate_probs": q.candidate_probs.tolist(),
        "correlation": correlation,
    }
    if q.text is not None:
        d["text"] = q.text
    return d


def query_from_dict(d: dict) -> QueryRecord:
    if not isinstance(d, dict):
        raise InvalidInputError("query must be a JSON object")
    missing = [k for k in ("id", "concept_embeddings", "stakeholder_count", "candidate_probs", "correlation")
               if k not in d]
    if missing:
        raise InvalidInputError(f"query is missing fields {missing}")
    corr = d["correlation"]
    if not isinstance(corr, dict) or len(corr) != 1 or not ({"joint", "embedding"} & set(corr)):
        raise InvalidInputError('correlation must be {"joint": [[...]]} or {"embedding": [...]}')
    try:
        corr_input = DiscreteJoint(corr["joint"]) if "joint" in corr else np.asarray(corr["embedding"], dtype=float)
        return QueryRecord(
            id=d["id"],
            concept_embeddings=np.asarray(d["concept_embeddings"], dtype=float),
            stakeholder_count=d["stakeholder_count"],
            candidate_probs=np.asarray(d["candidate_probs"], dtype=float),
            correlation_input=corr_input,
            text=d.get("text"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(str(exc)) from exc


def parse_query_line(line: str) -> QueryRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"not valid JSON: {exc.msg}") from exc
    return query_from_dict(obj)


def iter_lines(text: str) -> Iterator[tuple[int, str]]:
    """Non-blank lines with 1-based line numbers."""
    for no, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield no, line


def dumps_queries(queries: Iterable[QueryRecord]) -> str:
    return "".join(dumps_line(query_to_dict(q)) for q in queries)


def loads_queries(text: str) -> list[QueryRecord]:
    out, seen = [], set()
    for no, line in iter_lines(text):
        try:
            q = parse_query_line(line)
        except InvalidInputError as exc:
            raise InvalidInputError(f"line {no}: {exc}") from exc
        if q.id in seen:
            raise InvalidInputError(f"line {no}: duplicate query id {q.id!r}")
        seen.add(q.id)
        out.append(q)
    return out


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


def simulated_to_dict(q: SimulatedQuery) -> dict:
    return {
        "query": query_to_dict(q.record),
        "latent_complexity": q.latent_complexity,
        "n_options": q.n_options,
        "category": q.category,
        "oracle_label": q.oracle_label.value if q.oracle_label is not None else None,
    }


def simulated_from_dict(d: dict) -> SimulatedQuery:
    try:
        return SimulatedQuery(
            record=query_from_dict(d["query"]),
            latent_complexity=float(d["latent_complexity"]),
            n_options=int(d["n_options"]),
            category=d["category"],
            oracle_label=Strategy(d["oracle_label"]) if d.get("oracle_label") is not None else None,
        )
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed corpus entry: {exc}") from exc


def dumps_corpus(corpus: Iterable[SimulatedQuery]) -> str:
    return "".join(dumps_line(simulated_to_dict(q)) for q in corpus)


def loads_corpus(text: str) -> list[SimulatedQuery]:
    out = []
    for no, line in iter_lines(text):
        try:
            out.append(simulated_from_dict(json.loads(line)))
        except (json.JSONDecodeError, InvalidInputError, ValueError) as exc:
            raise InvalidInputError(f"line {no}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Decisions
# ---------------------------------------------------------------------------


def decision_to_dict(query_id: str, decision: RoutingDecision) -> dict:
    f = decision.features
    return {
        "id": query_id,
        "strategy": decision.strategy.value,
        "score": decision.score,
        "tau": decision.tau_at_decision,
        "features": None if f is None else {"c_s": f.c_s, "d_c": f.d_c, "s_m": f.s_m, "u_l": f.u_l},
    }


def decision_from_dict(d: dict) -> tuple[str, RoutingDecision]:
    f = d.get("features")
    feats = None if f is None else FeatureVector(f["c_s"], f["d_c"], f["s_m"], f["u_l"])
    return d["id"], RoutingDecision(Strategy(d["strategy"]), float(d["score"]), float(d["tau"]), feats)


def error_sentinel(line_no: int, message: str, query_id: str | None = None) -> dict:
    return {"id": query_id, "line": line_no, "error": message}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusConfig(_Strict):
    n_queries: int = Field(2000, gt=0)
    n_train: int | None = Field(None, gt=0)
    category_mix: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_MIX))
    noise_scale: float = Field(0.1, ge=0)
    n_options: int = Field(4, ge=2)

    @field_validator("category_mix")
    @classmethod
    def _mix(cls, v):
        unknown = sorted(set(v) - set(CATEGORIES))
        if unknown:
            raise ValueError(f"unknown categories {unknown}; expected a subset of {list(CATEGORIES)}")
        if any(p < 0 for p in v.values()):
            raise ValueError("proportions must be non-negative")
        total = sum(v.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"proportions sum to {total!r}, must sum to 1")
        return v


class ProfileConfig(_Strict):
    accuracy_points: list[tuple[float, float]]
    token_mean: float = Field(gt=0)
    token_std: float = Field(ge=0)
    latency_mean: float = Field(gt=0)
    latency_std: float = Field(ge=0)
    stage_fractions: list[float] | None = None

    @classmethod
    def of(cls, p: EngineProfile) -> "ProfileConfig":
        return cls(
            accuracy_points=[list(pt) for pt in p.accuracy_points],
            token_mean=p.token_mean, token_std=p.token_std,
            latency_mean=p.latency_mean, latency_std=p.latency_std,
            stage_fractions=list(p.stage_fractions) if p.stage_fractions else None,
        )

    def build(self, kind: Strategy) -> EngineProfile:
        return EngineProfile(
            kind, tuple(self.accuracy_points), self.token_mean, self.token_std,
            self.latency_mean, self.latency_std,
            tuple(self.stage_fractions) if self.stage_fractions is not None else None,
        )


class EnginesConfig(_Strict):
    fast: ProfileConfig = Field(default_factory=lambda: ProfileConfig.of(FAST_DEFAULT))
    slow: ProfileConfig = Field(default_factory=lambda: ProfileConfig.of(SLOW_DEFAULT))
    lambda_cost: float = Field(0.1, ge=0)

    @field_validator("fast", "slow", mode="before")
    @classmethod
    def _fill(cls, v, info):
        if isinstance(v, dict):
            base = FAST_DEFAULT if info.field_name == "fast" else SLOW_DEFAULT
            return {**ProfileConfig.of(base).model_dump(), **v}
        return v

    @model_validator(mode="after")
    def _profiles(self):
        try:
            self.build()
        except InvalidInputError as exc:
            raise ValueError(str(exc)) from exc
        return self

    def build(self) -> EngineSet:
        return EngineSet(self.fast.build(Strategy.FAST), self.slow.build(Strategy.SLOW),
                         UtilityConfig(self.lambda_cost))


class TrainSettings(_Strict):
    learning_rate: float = Field(gt=0)
    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    init_scale: float = Field(gt=0)

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, seed, self.init_scale)


class NeuralSettings(TrainSettings):
    hidden: list[int] = Field(default_factory=lambda: [8])

    @field_validator("hidden")
    @classmethod
    def _hidden(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v


_TRAIN_DEFAULTS = {
    "linear": dict(learning_rate=0.5, epochs=400, batch_size=64, init_scale=0.1),
    "neural": dict(learning_rate=0.5, epochs=200, batch_size=32, init_scale=0.5),
}


class PolicyConfig(_Strict):
    kinds: list[Literal["linear", "neural", "tree"]] = Field(default_factory=lambda: ["linear", "neural", "tree"])
    linear: TrainSettings = Field(
        default_factory=lambda: TrainSettings(**_TRAIN_DEFAULTS["linear"]))
    neural: NeuralSettings = Field(
        default_factory=lambda: NeuralSettings(**_TRAIN_DEFAULTS["neural"]))
    tree_max_depth: int = Field(4, ge=0)

    @field_validator("linear", "neural", mode="before")
    @classmethod
    def _fill(cls, v, info):
        # a partial section overrides only the keys it names
        if isinstance(v, dict):
            return {**_TRAIN_DEFAULTS[info.field_name], **v}
        return v


class ThresholdConfig(_Strict):
    tau0: float = 0.5
    alpha: float = Field(0.01, gt=0)
    window: int = Field(100, ge=1)
    tau_min: float = 0.05
    tau_max: float = 0.95
    epsilon: float = Field(0.1, ge=0, le=1)
    adapt: bool = False

    @model_validator(mode="after")
    def _clamps(self):
        if self.tau_min > self.tau_max:
            raise ValueError("tau_min must not exceed tau_max")
        return self

    def build(self) -> ThresholdSettings:
        return ThresholdSettings(self.tau0, self.alpha, self.window, self.tau_min, self.tau_max,
                                 self.epsilon, self.adapt)


class FeatureConfig(_Strict):
    min_cluster_size: int = Field(2, ge=1)
    merge_distance: float = Field(0.5, gt=0)

    def build(self) -> ClusteringSettings:
        return ClusteringSettings(self.min_cluster_size, self.merge_distance)


class BenchConfig(_Strict):
    repeats: int = Field(10, ge=1)
    bootstrap_resamples: int = Field(10_000, ge=1)
    ece_bins: int = Field(10, ge=1)
    confidence_threshold: float = Field(0.7, ge=0, le=1)
    baselines: list[str] | None = None

    @field_validator("baselines")
    @classmethod
    def _known(cls, v):
        if v is not None:
            bad = [b for b in v if b not in BASELINES]
            if bad:
                raise ValueError(f"unknown baselines {bad}")
        return v


class AppConfig(_Strict):
    seed: int = Field(42, ge=0, lt=2**64)
    output_dir: str = "cdr-out"
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    engines: EnginesConfig = Field(default_factory=EnginesConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    threshold: ThresholdConfig = Field(default_factory=ThresholdConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    def corpus_spec(self) -> CorpusSpec:
        c = self.corpus
        return CorpusSpec(c.n_queries, self.seed, dict(c.category_mix), c.noise_scale, c.n_options)

    def train_spec(self) -> CorpusSpec:
        c = self.corpus
        return CorpusSpec(c.n_train or c.n_queries, self.seed, dict(c.category_mix), c.noise_scale, c.n_options)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(data: dict | None) -> AppConfig:
    """Validate a configuration mapping; a run manifest is accepted too."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    if "manifest_version" in data:
        data = data.get("config") or {}
    try:
        return AppConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def loads_config(text: str) -> AppConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dumps_config(cfg: AppConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def manifest(cfg: AppConfig, artifacts: dict[str, str], version: str) -> str:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": version,
        "config": cfg.model_dump(mode="json", exclude={"output_dir"}),
        "artifacts": dict(sorted(artifacts.items())),
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"
