"""Pipeline configuration: a single YAML document describing ingestion,
schema, fairness specs, objective, solver settings, and outputs.

Configurations round-trip losslessly (load -> serialize -> load is the
identity on the canonical form) and carry a seed-independent fingerprint
over everything that determines the learned kernel; artifacts embed the
fingerprint so audits can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .constants import DEFAULT_MAX_ITERS, DEFAULT_TOL, FORBIDDEN
from .constraints import DiscriminationSpec
from .distortion import (
    DistortionBudget,
    DistortionMetric,
    RuleCondition,
    TableRule,
    label_table,
    ordinal_jump_table,
    validate_metric,
)
from .domain import Alphabet, Quantizer, Schema, Variable
from .errors import ConfigError, InvalidParamsError

FILTER_OPS = ("==", "!=", "<", "<=", ">", ">=", "in", "not_in", "between")


@dataclass(frozen=True)
class Filter:
    """Row predicate applied at ingestion, before quantization."""

    column: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in FILTER_OPS:
            raise ConfigError(f"unknown filter op {self.op!r}")

    def accepts(self, raw: str) -> bool:
        raw = raw.strip()
        if self.op in ("in", "not_in"):
            members = [str(v) for v in self.value]
            return (raw in members) == (self.op == "in")
        if self.op == "between":
            lo, hi = self.value
            try:
                x = float(raw)
            except ValueError:
                return False
            return float(lo) <= x <= float(hi)
        try:
            lhs, rhs = float(raw), float(self.value)
        except (TypeError, ValueError):
            lhs, rhs = raw, str(self.value)
        if self.op == "==":
            return lhs == rhs
        if self.op == "!=":
            return lhs != rhs
        if self.op == "<":
            return lhs < rhs
        if self.op == "<=":
            return lhs <= rhs
        if self.op == ">":
            return lhs > rhs
        return lhs >= rhs


@dataclass(frozen=True)
class SolverConfig:
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    strategy: str = "full"  # full | sof_fix_conditional | sof_alternating
    max_outer: int = 100

    def __post_init__(self):
        if self.tol <= 0:
            raise ConfigError("solver tol must be positive")
        if self.strategy not in ("full", "sof_fix_conditional", "sof_alternating"):
            raise ConfigError(f"unknown solver strategy {self.strategy!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one fit/transform/audit run needs."""

    input_path: str
    delimiter: str
    has_header: bool
    columns: Optional[tuple[str, ...]]
    schema: Schema
    filters: tuple[Filter, ...]
    discrimination: DiscriminationSpec
    metric: Optional[DistortionMetric]
    budget: Optional[DistortionBudget]
    objective: str
    solver: SolverConfig
    seed: int
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def fingerprint(self) -> str:
        """Hash of the kernel-determining parts; seed and paths excluded."""
        parts = {
            k: self.raw.get(k)
            for k in ("schema", "discrimination", "distortion", "objective", "solver")
        }
        blob = json.dumps(parts, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _canonical(raw: dict) -> dict:
    """Fill defaults so equal configurations serialize identically."""
    out = {
        "input": {
            "path": raw.get("input", {}).get("path", ""),
            "delimiter": raw.get("input", {}).get("delimiter", ","),
            "has_header": bool(raw.get("input", {}).get("has_header", True)),
            "columns": raw.get("input", {}).get("columns"),
        },
        "schema": {
            "variables": [
                {
                    "name": v["name"],
                    "role": v["role"],
                    "categories": [str(c) for c in v["categories"]],
                    "ordinal": bool(v.get("ordinal", False)),
                    "quantizer": v.get("quantizer"),
                }
                for v in raw.get("schema", {}).get("variables", [])
            ],
            "filters": [
                {"column": f["column"], "op": f["op"], "value": f["value"]}
                for f in raw.get("schema", {}).get("filters", [])
            ],
        },
        "discrimination": {
            "mode": raw.get("discrimination", {}).get("mode", "target"),
            "epsilon": raw.get("discrimination", {}).get("epsilon", 0.1),
            "target": raw.get("discrimination", {}).get("target"),
            "condition_on": list(
                raw.get("discrimination", {}).get("condition_on", [])
            ),
            "min_cell_count": int(
                raw.get("discrimination", {}).get("min_cell_count", 20)
            ),
        },
        "distortion": raw.get("distortion"),
        "objective": raw.get("objective", "kl"),
        "solver": {
            "tol": float(raw.get("solver", {}).get("tol", DEFAULT_TOL)),
            "max_iters": int(
                raw.get("solver", {}).get("max_iters", DEFAULT_MAX_ITERS)
            ),
            "strategy": raw.get("solver", {}).get("strategy", "full"),
            "max_outer": int(raw.get("solver", {}).get("max_outer", 100)),
        },
        "seed": int(raw.get("seed", 0)),
        "output": {"dir": raw.get("output", {}).get("dir", "out")},
    }
    dist = out["distortion"]
    if dist is not None:
        metric = dist.get("metric", {})
        canon_metric = {"kind": metric.get("kind", "per_attribute")}
        if canon_metric["kind"] == "per_attribute":
            canon_metric["combiner"] = metric.get("combiner", "sum_of_squares")
            canon_metric["attributes"] = metric.get("attributes", {})
        else:
            canon_metric["rules"] = metric.get("rules", [])
        budget = dist.get("budget", {})
        canon_budget = {"mode": budget.get("mode", "expected")}
        if canon_budget["mode"] == "expected":
            canon_budget["c"] = budget.get("c", 0.0)
        else:
            canon_budget["pairs"] = [
                [float(t), float(b)] for t, b in budget.get("pairs", [])
            ]
        out["distortion"] = {"metric": canon_metric, "budget": canon_budget}
    return out


def _build_quantizer(spec: Optional[dict]) -> Optional[Quantizer]:
    if spec is None:
        return None
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return Quantizer("identity")
    if kind == "map":
        return Quantizer(
            "map",
            mapping={str(k): str(v) for k, v in spec.get("mapping", {}).items()},
            default=spec.get("default"),
            drop_unmapped=bool(spec.get("drop_unmapped", False)),
        )
    if kind == "bins":
        return Quantizer(
            "bins",
            edges=tuple(float(e) for e in spec["edges"]),
            labels=tuple(str(l) for l in spec["labels"]),
        )
    raise ConfigError(f"unknown quantizer kind {kind!r}")


def _build_schema(raw: dict) -> Schema:
    variables = []
    for v in raw["schema"]["variables"]:
        alphabet = Alphabet(
            v["name"], tuple(v["categories"]), ordinal=bool(v.get("ordinal", False))
        )
        variables.append(
            Variable(alphabet, v["role"], _build_quantizer(v.get("quantizer")))
        )
    try:
        return Schema(tuple(variables))
    except InvalidParamsError as exc:
        raise ConfigError(str(exc)) from exc


def _epsilon_from_config(raw_eps, schema: Schema, mode: str):
    if isinstance(raw_eps, (int, float)):
        return float(raw_eps)
    if not isinstance(raw_eps, list):
        raise ConfigError("epsilon must be a number or a list of entries")
    eps = {}
    for entry in raw_eps:
        y = schema.y_from_label(str(entry["y"]))
        value = float(entry["value"])
        if mode == "pairwise":
            key = (y, schema.d_from_label(entry["d1"]), schema.d_from_label(entry["d2"]))
        elif mode == "conditional":
            key = (y, schema.d_from_label(entry["d"]), int(entry["b"]))
        else:
            key = (y, schema.d_from_label(entry["d"]))
        eps[key] = value
    return eps


def _build_discrimination(raw: dict, schema: Schema) -> DiscriminationSpec:
    d = raw["discrimination"]
    target = d.get("target")
    if target is not None:
        target = np.asarray([float(t) for t in target])
    x_names = {v.name for v in schema.x_vars}
    for name in d.get("condition_on", ()):
        if name not in x_names:
            raise ConfigError(
                f"condition_on variable {name!r} is not a feature variable"
            )
    try:
        return DiscriminationSpec(
            mode=d["mode"],
            target=target,
            epsilon=_epsilon_from_config(d["epsilon"], schema, d["mode"]),
            condition_on=tuple(d.get("condition_on", ())),
            min_cell_count=int(d.get("min_cell_count", 20)),
        )
    except InvalidParamsError as exc:
        raise ConfigError(str(exc)) from exc


def _build_metric(raw: Optional[dict], schema: Schema):
    if raw is None:
        return None, None
    try:
        return _build_metric_inner(raw, schema)
    except InvalidParamsError as exc:
        raise ConfigError(str(exc)) from exc


def _build_metric_inner(raw: dict, schema: Schema):
    mspec = raw["metric"]
    kind = mspec.get("kind", "per_attribute")
    if kind == "per_attribute":
        attrs = mspec.get("attributes", {})
        x_tables = []
        for var in schema.x_vars:
            aspec = attrs.get(var.name)
            if aspec is None:
                x_tables.append(np.zeros((len(var.alphabet),) * 2))
                continue
            x_tables.append(_attribute_table(aspec, var.alphabet))
        yspec = attrs.get(schema.y_var.name)
        if yspec is None:
            y_table = np.zeros((2, 2))
        else:
            y_table = _attribute_table(yspec, schema.y_var.alphabet)
        metric = DistortionMetric(
            "per_attribute",
            combiner=mspec.get("combiner", "sum_of_squares"),
            x_tables=tuple(x_tables),
            y_table=y_table,
        )
    elif kind == "rule_table":
        rules = []
        for r in mspec.get("rules", []):
            rules.append(
                TableRule(
                    value=float(r["value"]),
                    if_all=tuple(_condition(c) for c in r.get("if_all", [])),
                    if_any=tuple(_condition(c) for c in r.get("if_any", [])),
                )
            )
        metric = DistortionMetric("rule_table", rules=tuple(rules))
    else:
        raise ConfigError(f"unknown metric kind {kind!r}")
    try:
        validate_metric(metric, schema)
    except InvalidParamsError as exc:
        raise ConfigError(str(exc)) from exc
    bspec = raw["budget"]
    try:
        if bspec["mode"] == "expected":
            budget = DistortionBudget("expected", c=float(bspec["c"]))
        else:
            budget = DistortionBudget(
                "thresholded",
                pairs=tuple((float(t), float(b)) for t, b in bspec["pairs"]),
            )
    except InvalidParamsError as exc:
        raise ConfigError(str(exc)) from exc
    return metric, budget


def _attribute_table(aspec: dict, alphabet: Alphabet) -> np.ndarray:
    kind = aspec.get("kind", "table")
    if kind == "ordinal_jump":
        return ordinal_jump_table(
            len(alphabet),
            {int(k): float(v) for k, v in aspec.get("penalties", {}).items()},
            above=float(aspec.get("above", FORBIDDEN)),
        )
    if kind == "table":
        return label_table(
            alphabet.categories,
            {
                str(f): {str(t): float(v) for t, v in row.items()}
                for f, row in aspec.get("values", {}).items()
            },
        )
    raise ConfigError(f"unknown attribute rule kind {kind!r}")


def _condition(c: dict) -> RuleCondition:
    keys = {
        "jump", "jump_min", "jump_max", "abs_jump", "abs_jump_min", "abs_jump_max",
    }
    return RuleCondition(
        var=str(c["var"]),
        **{k: int(v) for k, v in c.items() if k in keys},
    )


def config_from_dict(raw: dict) -> PipelineConfig:
    """Validate and compile a raw mapping into a ready configuration."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    raw = _canonical(raw)
    if not raw["schema"]["variables"]:
        raise ConfigError("schema.variables must be non-empty")
    schema = _build_schema(raw)
    filters = tuple(
        Filter(f["column"], f["op"], f["value"]) for f in raw["schema"]["filters"]
    )
    disc = _build_discrimination(raw, schema)
    metric, budget = _build_metric(raw["distortion"], schema)
    objective = raw["objective"]
    if objective not in ("kl", "l1"):
        raise ConfigError(f"unknown objective {objective!r}")
    solver = SolverConfig(
        tol=raw["solver"]["tol"],
        max_iters=raw["solver"]["max_iters"],
        strategy=raw["solver"]["strategy"],
        max_outer=raw["solver"]["max_outer"],
    )
    columns = raw["input"]["columns"]
    return PipelineConfig(
        input_path=raw["input"]["path"],
        delimiter=raw["input"]["delimiter"],
        has_header=raw["input"]["has_header"],
        columns=tuple(columns) if columns else None,
        schema=schema,
        filters=filters,
        discrimination=disc,
        metric=metric,
        budget=budget,
        objective=objective,
        solver=solver,
        seed=raw["seed"],
        output_dir=raw["output"]["dir"],
        raw=raw,
    )


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {})


def loads_config(text: str) -> PipelineConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return config_from_dict(raw or {})
