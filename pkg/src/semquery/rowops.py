"""Logically row-wise operators: sem_filter (with cascades), sem_map, sem_extract."""
from __future__ import annotations

import json
from dataclasses import dataclass

from . import langex as lx
from .runtime import CallMeter, LmRequest, complete_batch, label_confidence
from .table import Table, render_cell

FILTER_INSTRUCTION = (
    "The user will provide a claim and some relevant context. Your job is to "
    'determine whether the claim is true for the given context. You must answer '
    'with a single word, "True" or "False".'
)
MAP_INSTRUCTION = (
    "The user will provide an instruction over some data. Follow the instruction "
    "and answer concisely."
)
EXTRACT_INSTRUCTION = (
    "The user will provide an instruction over a source text. Answer with direct "
    "quotes only: each output line must be a verbatim snippet copied from the "
    "source text, one snippet per line."
)

FILTER_LABELS = ("True", "False")


@dataclass(frozen=True)
class CascadeConfig:
    proxy: object
    oracle: object
    confidence_threshold: float

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in [0, 1]")


def _decide(result, meter: CallMeter | None, op: str) -> tuple[bool, float]:
    """Boolean decision and confidence from a True/False labelled result."""
    if result.label_logprobs:
        chosen, conf = label_confidence(result)
        return chosen == "True", conf
    text = (result.text or "").strip()
    for label in FILTER_LABELS:
        if text.startswith(label):
            return label == "True", 1.0
    if meter is not None:
        meter.record_malformed(op)
    return False, 0.0


def evaluate_predicate_batch(
    prompts: list[str],
    backend=None,
    cascade: CascadeConfig | None = None,
    demos=None,
    meter: CallMeter | None = None,
    op: str = "sem_filter",
    parallelism: int = 64,
) -> list[bool]:
    """Batched True/False evaluation; shared by sem_filter and the joins.

    Without a cascade each prompt costs one call on `backend`. With one, the
    proxy answers first and prompts whose confidence falls below the
    threshold are re-evaluated in a single oracle batch whose decision wins
    (threshold 1.0 escalates everything, 0.0 nothing).
    """
    if not prompts:
        return []
    demos = tuple(demos) if demos else None
    requests = [
        LmRequest(FILTER_INSTRUCTION, p, label_set=FILTER_LABELS, demonstrations=demos)
        for p in prompts
    ]
    if cascade is None:
        results = complete_batch(backend, requests, parallelism, meter, op)
        return [_decide(r, meter, op)[0] for r in results]

    proxy_results = complete_batch(cascade.proxy, requests, parallelism, meter, op, role="proxy")
    decisions: list[bool] = []
    escalate: list[int] = []
    tau = cascade.confidence_threshold
    for i, result in enumerate(proxy_results):
        decision, conf = _decide(result, meter, op)
        decisions.append(decision)
        if tau >= 1.0 or conf < tau:
            escalate.append(i)
    if escalate:
        oracle_results = complete_batch(
            cascade.oracle, [requests[i] for i in escalate], parallelism, meter, op, role="oracle"
        )
        for i, result in zip(escalate, oracle_results):
            decisions[i] = _decide(result, meter, op)[0]
    return decisions


def sem_filter(
    t: Table,
    predicate: lx.Langex,
    backend=None,
    cascade: CascadeConfig | None = None,
    demos=None,
    meter: CallMeter | None = None,
    parallelism: int = 64,
    op_name: str = "sem_filter",
) -> Table:
    """Keep exactly the rows whose predicate decision is True, in order."""
    lx.validate(predicate, t.schema, "single")
    prompts = [
        "Claim: " + lx.render(predicate, t.row_dict(i), row_id=i) for i in range(t.row_count)
    ]
    decisions = evaluate_predicate_batch(
        prompts, backend, cascade, demos, meter, op_name, parallelism
    )
    return t.select_rows([i for i, keep in enumerate(decisions) if keep])


def sem_map(
    t: Table,
    projection: lx.Langex,
    name: str,
    backend=None,
    demos=None,
    meter: CallMeter | None = None,
    parallelism: int = 64,
    op_name: str = "sem_map",
) -> Table:
    """One batched LM pass producing a new text column, row order preserved."""
    lx.validate(projection, t.schema, "single")
    if name in t.columns:
        raise lx.LangexValidationError("column %r already exists" % name)
    if t.row_count == 0:
        return t.with_column(name, "text", [])
    demos = tuple(demos) if demos else None
    requests = [
        LmRequest(MAP_INSTRUCTION, lx.render(projection, t.row_dict(i), row_id=i),
                  demonstrations=demos)
        for i in range(t.row_count)
    ]
    results = complete_batch(backend, requests, parallelism, meter, op_name)
    return t.with_column(name, "text", [r.text for r in results])


def _source_text(t: Table, projection: lx.Langex, row: int) -> str:
    cells = []
    for ph in projection.placeholders:
        value = t.cell(row, ph.column)
        if value is not None:
            cells.append(render_cell(value))
    return "\n".join(cells)


def sem_extract(
    t: Table,
    projection: lx.Langex,
    name: str,
    backend=None,
    meter: CallMeter | None = None,
    parallelism: int = 64,
    op_name: str = "sem_extract",
) -> Table:
    """Like sem_map, but the new column holds verified verbatim snippets.

    Each output line must occur in the concatenation of the row's referenced
    source cells; fabricated lines are dropped and counted as malformed. The
    cell is a JSON-encoded list of the surviving snippets in source order.
    """
    lx.validate(projection, t.schema, "single")
    if name in t.columns:
        raise lx.LangexValidationError("column %r already exists" % name)
    if t.row_count == 0:
        return t.with_column(name, "text", [])
    requests = [
        LmRequest(EXTRACT_INSTRUCTION, lx.render(projection, t.row_dict(i), row_id=i))
        for i in range(t.row_count)
    ]
    results = complete_batch(backend, requests, parallelism, meter, op_name)
    cells = []
    for i, result in enumerate(results):
        source = _source_text(t, projection, i)
        kept = []
        for line in (result.text or "").splitlines():
            snippet = line.strip()
            if not snippet:
                continue
            if snippet in source:
                kept.append(snippet)
            elif meter is not None:
                meter.record_malformed(op_name)
        kept.sort(key=source.find)
        cells.append(json.dumps(kept))
    return t.with_column(name, "text", cells)
