"""Experiment configuration: a YAML (or JSON) document validated by pydantic.

Unknown keys are rejected. Validation errors carry the line and column of
the offending key in the source text.
"""

from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, StabilityError
from .kernel import LOWEST
from .network import DelayKernel, Node, Topology
from .prob import ArrivalModel, Limits


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ArrivalSpec(_Strict):
    family: Literal["poisson", "pmf"] = "poisson"
    rate: Optional[float] = Field(None, ge=0)
    probs: Optional[list[float]] = None
    n_max: int = Field(60, ge=1)

    @model_validator(mode="after")
    def _params(self):
        if self.family == "poisson" and self.rate is None:
            raise ValueError("poisson arrivals need 'rate'")
        if self.family == "pmf" and not self.probs:
            raise ValueError("pmf arrivals need 'probs'")
        return self

    def model(self) -> ArrivalModel:
        if self.family == "poisson":
            return ArrivalModel.poisson(self.rate, self.n_max)
        return ArrivalModel.explicit(self.probs)


class KernelSpec(_Strict):
    kind: Literal["identity", "light_load", "explicit"] = "identity"
    alpha: float = Field(0.0, ge=0, le=1)
    rows: Optional[dict[int, dict[int, float]]] = None

    def kernel(self) -> DelayKernel:
        try:
            return DelayKernel(self.kind, self.alpha, self.rows)
        except ValueError as exc:
            raise ConfigError(f"kernel: {exc}") from exc


class NodeSpec(_Strict):
    name: str
    parent: Optional[str] = None
    arrival: ArrivalSpec
    priority: Optional[Literal["lowest", "equal"]] = None
    kernel: KernelSpec = KernelSpec()


class TopologySpec(_Strict):
    priority: Literal["lowest", "equal"] = LOWEST
    nodes: list[NodeSpec] = Field(min_length=1)

    def build(self) -> Topology:
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("topology: node names must be unique")
        parents = []
        for n in self.nodes:
            if n.parent is not None and n.parent not in names:
                raise ConfigError(f"topology: node {n.name!r} names unknown parent {n.parent!r}")
            parents.append(None if n.parent is None else names.index(n.parent))
        nodes = tuple(Node(n.name, n.arrival.model(), n.priority or self.priority) for n in self.nodes)
        kernels = tuple(n.kernel.kernel() for n in self.nodes)
        try:
            return Topology(nodes, tuple(parents), kernels)
        except (ConfigError, StabilityError):
            raise
        except ValueError as exc:
            raise ConfigError(f"topology: {exc}") from exc


class LimitsSpec(_Strict):
    n1: int = Field(60, ge=1)
    n2: int = Field(60, ge=1)
    n3: int = Field(60, ge=1)
    tail_tol: float = Field(1e-6, gt=0)

    def build(self) -> Limits:
        return Limits(self.n1, self.n2, self.n3, self.tail_tol)


class ProbeSpec(_Strict):
    d0: int = Field(1, ge=1)
    rate: Optional[float] = Field(None, gt=0, lt=1)
    mean_gap: Optional[float] = Field(None, gt=1)  # alternative to rate: mean slots between pairs
    horizon: int = Field(1_000_000, ge=1)
    seed: int = 0
    block: int = Field(500, ge=1)
    a: float = Field(0.05, gt=0, le=1)
    warmup: Optional[int] = Field(None, ge=0)

    @property
    def probe_rate(self) -> float:
        if self.rate is not None and self.mean_gap is not None:
            raise ConfigError("probe: give either 'rate' or 'mean_gap', not both")
        if self.mean_gap is not None:
            return 1.0 / self.mean_gap
        return self.rate if self.rate is not None else 0.005


class GridSettings(_Strict):
    lo: float = Field(0.01, ge=0, lt=1)
    hi: float = Field(0.99, gt=0, lt=1)
    step: float = Field(0.01, gt=0)


class AdaptiveSettings(_Strict):
    initial: Optional[list[float]] = None
    alpha0: float = 0.02
    alpha_min: float = 1e-4
    alpha_max: float = 0.1
    decrease: float = 0.5
    increase: float = 1.2
    grad_threshold: float = 0.05
    h: float = Field(1e-3, gt=0)
    burn_in: float = Field(0.2, ge=0, lt=1)  # fraction of blocks left out of the error summary


class EstimatorSpec(_Strict):
    mode: Literal["grid", "adaptive"] = "grid"
    distance: Literal["euclidean", "kl"] = "euclidean"
    input: Literal["simulate", "analytic"] = "simulate"
    grid: GridSettings = GridSettings()
    adaptive: AdaptiveSettings = AdaptiveSettings()
    keep_surface: bool = False
    max_ops: float = Field(2e11, gt=0)  # budget for surface scans, in kernel operations


class SegmentSpec(_Strict):
    start: int = Field(ge=0)
    rate_start: float = Field(ge=0)
    rate_end: Optional[float] = Field(None, ge=0)


class OutputSpec(_Strict):
    prefix: str = ""
    formats: list[Literal["csv", "json"]] = ["csv", "json"]


class ExperimentConfig(_Strict):
    topology: TopologySpec
    limits: LimitsSpec = LimitsSpec()
    probe: ProbeSpec = ProbeSpec()
    estimator: EstimatorSpec = EstimatorSpec()
    schedule: dict[str, list[SegmentSpec]] = {}
    outputs: OutputSpec = OutputSpec()


def _locate(root, loc) -> tuple[int, int] | None:
    """Line and column (1-based) of the node at pydantic location ``loc``."""
    node = root
    mark = getattr(node, "start_mark", None)
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(key):
                    mark, node = k.start_mark, v
                    break
            else:
                break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            mark = node.start_mark
        else:
            break
    if mark is None:
        return None
    return mark.line + 1, mark.column + 1


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            pos = _locate(root, err["loc"])
            where = f"{source}:{pos[0]}:{pos[1]}" if pos else source
            path = ".".join(str(p) for p in err["loc"])
            lines.append(f"{where}: {path}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
