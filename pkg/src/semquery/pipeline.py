"""Declarative pipeline runner: a YAML document naming inputs, backends, and
an ordered op list.

The whole spec is validated against inferred intermediate schemas before a
single LM call is made; a spec that fails validation performs zero calls.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import yaml

from . import langex as lx
from .agg import AggConfig, sem_agg
from .backends import (ConstantBackend, EchoBackend, EqualityFilterBackend,
                       HttpChatBackend, KeyedCompareBackend, KeyedFilterBackend,
                       ScriptedBackend)
from .errors import PipelineValidationError, SemQueryError
from .index import MockEmbedder, load_sem_index, sem_cluster_by, sem_search, sem_sim_join
from .join import JoinConfig, sem_join
from .rowops import CascadeConfig, sem_extract, sem_filter, sem_map
from .runtime import CallMeter, KeyedOracleConfig
from .table import Table, load_csv, partition_by_equality, render_cell, write_csv
from .topk import TopkConfig, sem_topk

KNOWN_OPS = (
    "sem_filter", "sem_map", "sem_extract", "sem_topk", "sem_join",
    "sem_sim_join", "sem_search", "sem_agg", "sem_cluster_by", "group_concat",
)


@dataclass
class PipelineSpec:
    inputs: dict            # name -> {"csv": path, "indexes": {col: dir}}
    ops: list[dict]
    backends: dict = field(default_factory=dict)
    cascades: dict = field(default_factory=dict)
    default_backend: str | None = None
    embedder: dict = field(default_factory=dict)
    output: str | None = None
    parallelism: int = 64

    @staticmethod
    def from_file(path) -> "PipelineSpec":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        return PipelineSpec.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "PipelineSpec":
        if not isinstance(doc, dict):
            raise PipelineValidationError("pipeline document must be a mapping")
        try:
            return PipelineSpec(
                inputs=dict(doc.get("inputs") or {}),
                ops=list(doc.get("ops") or []),
                backends=dict(doc.get("backends") or {}),
                cascades=dict(doc.get("cascades") or {}),
                default_backend=doc.get("default_backend"),
                embedder=dict(doc.get("embedder") or {}),
                output=doc.get("output"),
                parallelism=int(doc.get("parallelism", 64)),
            )
        except (TypeError, ValueError) as exc:
            raise PipelineValidationError("malformed pipeline document: %s" % exc)


@dataclass
class RunMetrics:
    per_op: dict
    row_counts: list[dict]
    total_wall_time: float
    total_lm_calls: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "total_lm_calls": self.total_lm_calls,
                "total_wall_time": round(self.total_wall_time, 6),
                "row_counts": self.row_counts,
                "per_op": self.per_op,
            },
            indent=2,
            sort_keys=True,
        )


def build_backend(config: dict):
    kind = config.get("type")
    if kind == "constant":
        return ConstantBackend(config.get("text", "True"))
    if kind == "always_true":
        return ConstantBackend("True")
    if kind == "always_false":
        return ConstantBackend("False")
    if kind == "echo":
        return EchoBackend()
    if kind == "scripted":
        return ScriptedBackend(config["answers"])
    if kind == "keyed_filter":
        return KeyedFilterBackend(threshold=float(config.get("threshold", 50.0)),
                                  temperature=float(config.get("temperature", 0.0)))
    if kind == "keyed_compare":
        return KeyedCompareBackend(KeyedOracleConfig(
            temperature=float(config.get("temperature", 0.0)),
            seed=int(config.get("seed", 0))))
    if kind == "equality_filter":
        return EqualityFilterBackend()
    if kind == "http":
        return HttpChatBackend(config["base_url"], config["model"],
                               api_key_env=config.get("api_key_env", "SEMQUERY_API_KEY"))
    raise PipelineValidationError("unknown backend type %r" % kind)


def build_embedder(config: dict) -> MockEmbedder:
    kind = config.get("type", "mock")
    if kind != "mock":
        raise PipelineValidationError("unknown embedder type %r" % kind)
    return MockEmbedder(dimension=int(config.get("dimension", 64)),
                        seed=int(config.get("seed", 0)))


class _SchemaState:
    """Schema plus the set of columns with a usable similarity index."""

    def __init__(self, schema, indexed):
        self.schema = list(schema)
        self.indexed = set(indexed)

    def names(self):
        return [n for n, _ in self.schema]


def _require(condition: bool, idx: int, message: str) -> None:
    if not condition:
        raise PipelineValidationError("op %d: %s" % (idx, message), op_index=idx)


def _parse_langex(idx: int, op: dict, key: str = "langex") -> lx.Langex:
    _require(key in op, idx, "missing %r parameter" % key)
    try:
        return lx.parse(op[key])
    except SemQueryError as exc:
        raise PipelineValidationError("op %d: %s" % (idx, exc), op_index=idx)


def _validate_langex(idx: int, parsed, schema, mode="single", schema_right=None):
    try:
        lx.validate(parsed, schema, mode, schema_right=schema_right)
    except SemQueryError as exc:
        raise PipelineValidationError("op %d: %s" % (idx, exc), op_index=idx)


def validate_pipeline(spec: PipelineSpec) -> list[_SchemaState]:
    """Pre-flight check of the whole op chain; returns per-op output states."""
    if not spec.inputs:
        raise PipelineValidationError("pipeline declares no inputs")
    if not spec.ops:
        raise PipelineValidationError("pipeline declares no ops")
    for name, backend_cfg in spec.backends.items():
        if not isinstance(backend_cfg, dict) or "type" not in backend_cfg:
            raise PipelineValidationError("backend %r needs a type" % name)
    for name, cascade_cfg in spec.cascades.items():
        for side in ("proxy", "oracle"):
            if cascade_cfg.get(side) not in spec.backends:
                raise PipelineValidationError(
                    "cascade %r references unknown backend %r" % (name, cascade_cfg.get(side))
                )
        tau = cascade_cfg.get("confidence_threshold")
        if tau is None or not 0.0 <= float(tau) <= 1.0:
            raise PipelineValidationError("cascade %r needs confidence_threshold in [0,1]" % name)

    input_states: dict[str, _SchemaState] = {}
    for name, input_cfg in spec.inputs.items():
        if "csv" not in input_cfg:
            raise PipelineValidationError("input %r needs a csv path" % name)
        try:
            table = load_csv(input_cfg["csv"])
        except (OSError, SemQueryError) as exc:
            raise PipelineValidationError("input %r: %s" % (name, exc))
        input_states[name] = _SchemaState(table.schema, (input_cfg.get("indexes") or {}).keys())

    def resolve_backend(idx: int, op: dict) -> None:
        if "cascade" in op:
            _require(op["cascade"] in spec.cascades, idx,
                     "unknown cascade %r" % op["cascade"])
        else:
            backend_name = op.get("backend", spec.default_backend)
            _require(backend_name in spec.backends, idx,
                     "unknown backend %r" % backend_name)

    states: list[_SchemaState] = []
    current: _SchemaState | None = None
    for idx, op in enumerate(spec.ops):
        kind = op.get("op")
        _require(kind in KNOWN_OPS, idx, "unknown op %r" % kind)
        source = op.get("table")
        if source is not None:
            _require(source in input_states, idx, "unknown input table %r" % source)
            current = _SchemaState(input_states[source].schema, input_states[source].indexed)
        _require(current is not None, idx, "first op must name an input table")
        names = set(current.names())

        if kind == "sem_filter":
            resolve_backend(idx, op)
            _validate_langex(idx, _parse_langex(idx, op), current.schema)
            current = _SchemaState(current.schema, set())
        elif kind in ("sem_map", "sem_extract"):
            resolve_backend(idx, op)
            _validate_langex(idx, _parse_langex(idx, op), current.schema)
            _require("name" in op, idx, "missing new column name")
            _require(op["name"] not in names, idx, "column %r already exists" % op["name"])
            current = _SchemaState(current.schema + [(op["name"], "text")], current.indexed)
        elif kind == "sem_topk":
            resolve_backend(idx, op)
            parsed = _parse_langex(idx, op)
            _validate_langex(idx, parsed, current.schema)
            _require(int(op.get("k", 0)) >= 1, idx, "k must be >= 1")
            for col in op.get("group_by") or []:
                _require(col in names, idx, "unknown group_by column %r" % col)
            if op.get("pivot_strategy") == "sem-index":
                _require(any(ph.column in current.indexed for ph in parsed.placeholders),
                         idx, "sem-index pivot needs an indexed criterion column")
            current = _SchemaState(current.schema, set())
        elif kind == "sem_join":
            resolve_backend(idx, op)
            _require(op.get("right") in input_states, idx,
                     "unknown right table %r" % op.get("right"))
            right = input_states[op["right"]]
            parsed = _parse_langex(idx, op)
            _validate_langex(idx, parsed, current.schema, "join", right.schema)
            pattern = op.get("pattern", "nested-loop")
            _require(pattern in ("nested-loop", "search-filter", "map-search-filter"),
                     idx, "unknown join pattern %r" % pattern)
            if pattern != "nested-loop":
                _require(int(op.get("call_budget", 0)) >= 1, idx,
                         "pattern %r needs a call_budget" % pattern)
                right_key = next((ph.column for ph in parsed.placeholders
                                  if ph.side == "right"), None)
                _require(right_key in right.indexed, idx,
                         "pattern %r needs an index on right column %r" % (pattern, right_key))
            merged = _merged_names(current.schema, right.schema)
            current = _SchemaState(merged, set())
        elif kind == "sem_sim_join":
            _require(op.get("right") in input_states, idx,
                     "unknown right table %r" % op.get("right"))
            right = input_states[op["right"]]
            _require(op.get("left_on") in names, idx,
                     "unknown left_on column %r" % op.get("left_on"))
            _require(op.get("right_on") in [n for n, _ in right.schema], idx,
                     "unknown right_on column %r" % op.get("right_on"))
            _require(op.get("right_on") in right.indexed, idx,
                     "sem_sim_join needs an index on right column %r" % op.get("right_on"))
            _require(int(op.get("k", 0)) >= 1, idx, "K must be >= 1")
            merged = _merged_names(current.schema, right.schema)
            if op.get("return_scores"):
                merged = merged + [("score", "float")]
            current = _SchemaState(merged, set())
        elif kind == "sem_search":
            _require(op.get("column") in names, idx, "unknown column %r" % op.get("column"))
            _require(op["column"] in current.indexed, idx,
                     "sem_search needs an index on column %r" % op["column"])
            _require("query" in op, idx, "missing query")
            _require(int(op.get("k", 0)) >= 1, idx, "K must be >= 1")
            schema = current.schema + ([("score", "float")] if op.get("return_scores") else [])
            current = _SchemaState(schema, set())
        elif kind == "sem_agg":
            resolve_backend(idx, op)
            _validate_langex(idx, _parse_langex(idx, op), current.schema)
            group_by = op.get("group_by") or []
            for col in group_by:
                _require(col in names, idx, "unknown group_by column %r" % col)
            name = op.get("name", "aggregation")
            kinds = dict(current.schema)
            schema = [(c, kinds[c]) for c in group_by] + [(name, "text")]
            current = _SchemaState(schema, set())
        elif kind == "sem_cluster_by":
            _require(op.get("column") in names, idx, "unknown column %r" % op.get("column"))
            _require(op["column"] in current.indexed, idx,
                     "sem_cluster_by needs an index on column %r" % op["column"])
            _require(int(op.get("n_clusters", 0)) >= 1, idx, "n_clusters must be >= 1")
            current = _SchemaState(current.schema + [("cluster_id", "int")], current.indexed)
        elif kind == "group_concat":
            group_by = op.get("group_by") or []
            _require(bool(group_by), idx, "group_concat needs group_by columns")
            for col in group_by:
                _require(col in names, idx, "unknown group_by column %r" % col)
            _require(op.get("column") in names, idx, "unknown column %r" % op.get("column"))
            name = op.get("name", "concat")
            kinds = dict(current.schema)
            schema = [(c, kinds[c]) for c in group_by] + [(name, "text")]
            current = _SchemaState(schema, set())
        states.append(current)
    return states


def _merged_names(left_schema, right_schema):
    left_names = {n for n, _ in left_schema}
    right_names = {n for n, _ in right_schema}
    clash = left_names & right_names
    merged = [((n + ":left") if n in clash else n, k) for n, k in left_schema]
    merged += [((n + ":right") if n in clash else n, k) for n, k in right_schema]
    return merged


def _group_concat(t: Table, group_by: list[str], column: str, name: str,
                  separator: str = "\n") -> Table:
    groups = partition_by_equality(t, group_by)
    kinds = dict(t.schema)
    schema = [(c, kinds[c]) for c in group_by] + [(name, "text")]
    cols: dict = {c: [] for c, _ in schema}
    for key, row_ids in groups:
        for pos, c in enumerate(group_by):
            cols[c].append(key[pos])
        cols[name].append(separator.join(
            render_cell(t.cell(i, column)) for i in row_ids if t.cell(i, column) is not None
        ))
    return Table.from_columns(schema, cols)


def run_pipeline(spec: PipelineSpec) -> tuple[Table, RunMetrics]:
    """Validate, then execute the op chain; metrics accompany the result."""
    validate_pipeline(spec)
    start = time.perf_counter()
    meter = CallMeter()
    embedder = build_embedder(spec.embedder)
    backends = {name: build_backend(cfg) for name, cfg in spec.backends.items()}
    cascades = {
        name: CascadeConfig(backends[cfg["proxy"]], backends[cfg["oracle"]],
                            float(cfg["confidence_threshold"]))
        for name, cfg in spec.cascades.items()
    }
    inputs: dict[str, Table] = {}
    for name, input_cfg in spec.inputs.items():
        table = load_csv(input_cfg["csv"])
        for col, directory in (input_cfg.get("indexes") or {}).items():
            load_sem_index(table, col, directory, embedder)
        inputs[name] = table

    def op_backend(op: dict):
        if "cascade" in op:
            return None, cascades[op["cascade"]]
        return backends[op.get("backend", spec.default_backend)], None

    row_counts = []
    current: Table | None = None
    for idx, op in enumerate(spec.ops):
        kind = op["op"]
        if op.get("table") is not None:
            current = inputs[op["table"]]
        label = "op%d:%s" % (idx, kind)
        if kind == "sem_filter":
            backend, cascade = op_backend(op)
            current = sem_filter(current, lx.parse(op["langex"]), backend=backend,
                                 cascade=cascade, meter=meter,
                                 parallelism=spec.parallelism, op_name=label)
        elif kind == "sem_map":
            backend, _ = op_backend(op)
            current = sem_map(current, lx.parse(op["langex"]), op["name"], backend=backend,
                              meter=meter, parallelism=spec.parallelism, op_name=label)
        elif kind == "sem_extract":
            backend, _ = op_backend(op)
            current = sem_extract(current, lx.parse(op["langex"]), op["name"],
                                  backend=backend, meter=meter,
                                  parallelism=spec.parallelism, op_name=label)
        elif kind == "sem_topk":
            backend, cascade = op_backend(op)
            cfg = TopkConfig(
                k=int(op["k"]),
                algorithm=op.get("algorithm", "quickselect"),
                pivot_strategy=op.get("pivot_strategy", "random"),
                pivot_seed=int(op.get("seed", 0)),
                cascade=cascade,
                group_by=tuple(op["group_by"]) if op.get("group_by") else None,
            )
            current = sem_topk(current, lx.parse(op["langex"]), cfg, backend=backend,
                               meter=meter, parallelism=spec.parallelism, op_name=label)
        elif kind == "sem_join":
            backend, cascade = op_backend(op)
            cfg = JoinConfig(
                pattern=op.get("pattern", "nested-loop"),
                call_budget=op.get("call_budget"),
                join_type=op.get("join_type", "inner"),
                cascade=cascade,
            )
            current = sem_join(current, inputs[op["right"]], lx.parse(op["langex"]), cfg,
                               backend=backend, meter=meter,
                               parallelism=spec.parallelism, op_name=label)
        elif kind == "sem_sim_join":
            current = sem_sim_join(current, inputs[op["right"]], op["left_on"],
                                   op["right_on"], int(op["k"]),
                                   return_scores=bool(op.get("return_scores")))
        elif kind == "sem_search":
            current = sem_search(current, op["column"], op["query"], int(op["k"]),
                                 return_scores=bool(op.get("return_scores")))
        elif kind == "sem_agg":
            backend, _ = op_backend(op)
            cfg = AggConfig(
                pattern=op.get("pattern", "hierarchical"),
                max_context_chars=int(op.get("max_context_chars", 32768)),
                group_by=tuple(op["group_by"]) if op.get("group_by") else None,
                partition_column=op.get("partition_column"),
            )
            current = sem_agg(current, lx.parse(op["langex"]), cfg, backend=backend,
                              meter=meter, parallelism=spec.parallelism,
                              name=op.get("name", "aggregation"), op_name=label)
        elif kind == "sem_cluster_by":
            current = sem_cluster_by(current, op["column"], int(op["n_clusters"]),
                                     seed=int(op.get("seed", 0)))
        elif kind == "group_concat":
            current = _group_concat(current, list(op["group_by"]), op["column"],
                                    op.get("name", "concat"), op.get("separator", "\n"))
        row_counts.append({"op": label, "rows": current.row_count})

    if spec.output:
        write_csv(current, spec.output)
    metrics = RunMetrics(
        per_op=meter.snapshot(),
        row_counts=row_counts,
        total_wall_time=time.perf_counter() - start,
        total_lm_calls=meter.total_lm_calls,
    )
    return current, metrics
