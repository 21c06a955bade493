"""Semantic top-k from pairwise LM comparisons.

Three aggregation algorithms over one comparison unit: quadratic win-count
ranking, a size-k heap with sequential updates, and quickselect whose rounds
dispatch all pivot comparisons as a single batch. Within-top-k order always
comes from a final quadratic pass over the k survivors (cache-assisted).
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from . import langex as lx
from .errors import IndexPersistenceError
from .rowops import CascadeConfig
from .runtime import (CallMeter, LmRequest, PairCache, complete_batch,
                      criterion_hash, label_confidence)
from .table import Table, partition_by_equality, render_cell

TOPK_INSTRUCTION = (
    "Your job is to select and return the most relevant document to the user's "
    "question. Carefully read the user's question and the two documents provided "
    'below. Respond only with the label of the document such as "Document NUMBER". '
    "NUMBER must be either 1 or 2, depending on which document is most relevant. "
    'You must pick a number and cannot say things like "None" or "Neither".'
)
COMPARE_LABELS = ("Document 1", "Document 2")


@dataclass(frozen=True)
class ComparisonOutcome:
    pair: tuple[int, int]
    winner: int
    source: str  # proxy | oracle | cache


@dataclass(frozen=True)
class TopkConfig:
    k: int
    algorithm: str = "quickselect"
    pivot_strategy: str = "random"  # random | sem-index
    pivot_seed: int = 0
    pivot_epsilon: int | None = None  # defaults to ceil(k/2)
    cascade: CascadeConfig | None = None
    group_by: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.algorithm not in ("quadratic", "heap", "quickselect"):
            raise ValueError("unknown algorithm %r" % self.algorithm)
        if self.pivot_strategy not in ("random", "sem-index"):
            raise ValueError("unknown pivot strategy %r" % self.pivot_strategy)
        if self.pivot_epsilon is not None and self.pivot_epsilon < 0:
            raise ValueError("pivot epsilon must be >= 0")


class LmComparator:
    """Builds pairwise prompts, dispatches them in batches, caches winners.

    The lower row id is always presented as Document 1 so a pair's prompt is
    order-insensitive; cache keys are the unordered pair plus a hash of the
    ranking criterion.
    """

    def __init__(self, table: Table, criterion: lx.Langex, backend=None,
                 cascade: CascadeConfig | None = None, cache: PairCache | None = None,
                 meter: CallMeter | None = None, op: str = "sem_topk", parallelism: int = 64):
        self.table = table
        self.criterion = criterion
        self.backend = backend
        self.cascade = cascade
        self.cache = cache if cache is not None else PairCache()
        self.meter = meter
        self.op = op
        self.parallelism = parallelism
        self.question = self._question_text(criterion)
        self.crit_hash = criterion_hash(criterion.source)
        self._doc_cache: dict[int, str] = {}

    @staticmethod
    def _question_text(criterion: lx.Langex) -> str:
        parts = []
        for seg in criterion.segments:
            parts.append(seg.text if isinstance(seg, lx.Literal) else "the document")
        return "".join(parts)

    def _doc_text(self, rid: int) -> str:
        if rid not in self._doc_cache:
            cells = [
                render_cell(self.table.cell(rid, ph.column))
                for ph in self.criterion.placeholders
                if self.table.cell(rid, ph.column) is not None
            ]
            self._doc_cache[rid] = "\n".join(cells)
        return self._doc_cache[rid]

    def _request(self, lo: int, hi: int) -> LmRequest:
        prompt = "Question: %s\nDocument 1: %s\nDocument 2: %s" % (
            self.question, self._doc_text(lo), self._doc_text(hi)
        )
        return LmRequest(TOPK_INSTRUCTION, prompt, label_set=COMPARE_LABELS)

    def _winner_label(self, result) -> str | None:
        if result.label_logprobs:
            return label_confidence(result)[0]
        text = (result.text or "").strip()
        for label in COMPARE_LABELS:
            if text.startswith(label):
                return label
        return None

    def _confidence(self, result) -> float:
        if result.label_logprobs:
            return label_confidence(result)[1]
        return 1.0 if self._winner_label(result) else 0.0

    def _dispatch(self, requests: list[LmRequest]) -> tuple[list, list[str]]:
        """Returns results plus each item's deciding source (proxy/oracle)."""
        if self.cascade is None:
            results = complete_batch(self.backend, requests, self.parallelism,
                                     self.meter, self.op)
            return results, ["oracle"] * len(requests)
        tau = self.cascade.confidence_threshold
        results = complete_batch(self.cascade.proxy, requests, self.parallelism,
                                 self.meter, self.op, role="proxy")
        sources = ["proxy"] * len(requests)
        escalate = [i for i, r in enumerate(results)
                    if tau >= 1.0 or self._confidence(r) < tau]
        if escalate:
            oracle_results = complete_batch(
                self.cascade.oracle, [requests[i] for i in escalate],
                self.parallelism, self.meter, self.op, role="oracle")
            for i, r in zip(escalate, oracle_results):
                results[i] = r
                sources[i] = "oracle"
        return results, sources

    def compare_many(self, pairs: list[tuple[int, int]]) -> dict[tuple[int, int], ComparisonOutcome]:
        """Resolve a set of pairs with one batch (plus one retry batch)."""
        outcomes: dict[tuple[int, int], ComparisonOutcome] = {}
        misses: list[tuple[int, int]] = []
        miss_set: set[tuple[int, int]] = set()
        for i, j in pairs:
            lo, hi = (i, j) if i < j else (j, i)
            if (lo, hi) in outcomes or (lo, hi) in miss_set:
                continue
            cached = self.cache.lookup((lo, hi), self.crit_hash)
            if cached is not None:
                if self.meter is not None:
                    self.meter.record_cache_hit(self.op)
                outcomes[(lo, hi)] = ComparisonOutcome((lo, hi), cached, "cache")
            else:
                misses.append((lo, hi))
                miss_set.add((lo, hi))
        if misses:
            requests = [self._request(lo, hi) for lo, hi in misses]
            results, sources = self._dispatch(requests)
            retry = [idx for idx, r in enumerate(results) if self._winner_label(r) is None]
            if retry:
                if self.meter is not None:
                    self.meter.record_malformed(self.op, len(retry))
                retry_results, retry_sources = self._dispatch([requests[idx] for idx in retry])
                for idx, r, s in zip(retry, retry_results, retry_sources):
                    results[idx] = r
                    sources[idx] = s
            for (lo, hi), result, source in zip(misses, results, sources):
                label = self._winner_label(result)
                if label is None:
                    # malformed twice: default to the first document
                    if self.meter is not None:
                        self.meter.record_malformed(self.op)
                    label = "Document 1"
                winner = lo if label == "Document 1" else hi
                self.cache.store((lo, hi), self.crit_hash, winner)
                outcomes[(lo, hi)] = ComparisonOutcome((lo, hi), winner, source)
        return outcomes

    def compare_pair(self, i: int, j: int) -> ComparisonOutcome:
        if i == j:
            raise ValueError("cannot compare a row with itself")
        lo, hi = (i, j) if i < j else (j, i)
        return self.compare_many([(lo, hi)])[(lo, hi)]


class FunctionComparator:
    """Comparator over a plain winner function; used by tests and benches."""

    def __init__(self, fn, meter: CallMeter | None = None, op: str = "compare"):
        self.fn = fn
        self.meter = meter
        self.op = op
        self.cache: dict[tuple[int, int], int] = {}

    def compare_many(self, pairs):
        outcomes = {}
        fresh = []
        seen = set()
        for i, j in pairs:
            lo, hi = (i, j) if i < j else (j, i)
            if (lo, hi) in self.cache:
                if self.meter is not None:
                    self.meter.record_cache_hit(self.op)
                outcomes[(lo, hi)] = ComparisonOutcome((lo, hi), self.cache[(lo, hi)], "cache")
            elif (lo, hi) not in seen:
                fresh.append((lo, hi))
                seen.add((lo, hi))
        if fresh:
            if self.meter is not None:
                self.meter.record_batch(self.op, len(fresh))
            for lo, hi in fresh:
                winner = self.fn(lo, hi)
                self.cache[(lo, hi)] = winner
                outcomes[(lo, hi)] = ComparisonOutcome((lo, hi), winner, "oracle")
        return outcomes

    def compare_pair(self, i, j):
        lo, hi = (i, j) if i < j else (j, i)
        return self.compare_many([(lo, hi)])[(lo, hi)]


def quadratic_topk(items: list[int], comparator, k: int) -> list[int]:
    """Rank by descending pairwise win count, ties by ascending row id."""
    if len(items) == 1:
        return list(items)
    pairs = [(items[a], items[b]) for a in range(len(items)) for b in range(a + 1, len(items))]
    outcomes = comparator.compare_many(pairs)
    wins = {rid: 0 for rid in items}
    for outcome in outcomes.values():
        wins[outcome.winner] += 1
    ranked = sorted(items, key=lambda rid: (-wins[rid], rid))
    return ranked[:k]


def heap_topk(items: list[int], comparator, k: int) -> list[int]:
    """Size-k heap with the current worst at the root; updates are sequential."""

    def beats(a: int, b: int) -> bool:
        return comparator.compare_pair(a, b).winner == a

    heap: list[int] = []

    def sift_up(pos: int) -> None:
        while pos > 0:
            parent = (pos - 1) // 2
            # min-heap on quality: the worse element stays above
            if beats(heap[parent], heap[pos]):
                heap[parent], heap[pos] = heap[pos], heap[parent]
                pos = parent
            else:
                break

    def sift_down(pos: int) -> None:
        size = len(heap)
        while True:
            left, right = 2 * pos + 1, 2 * pos + 2
            worst = pos
            if left < size and beats(heap[worst], heap[left]):
                worst = left
            if right < size and beats(heap[worst], heap[right]):
                worst = right
            if worst == pos:
                return
            heap[pos], heap[worst] = heap[worst], heap[pos]
            pos = worst

    for rid in items:
        if len(heap) < k:
            heap.append(rid)
            sift_up(len(heap) - 1)
        elif beats(rid, heap[0]):
            heap[0] = rid
            sift_down(0)

    drained = []
    while heap:
        drained.append(heap[0])
        heap[0] = heap[-1]
        heap.pop()
        if heap:
            sift_down(0)
    drained.reverse()  # root pops worst-first
    return drained


def quickselect_topk(items: list[int], comparator, k: int,
                     rng: random.Random | None = None,
                     first_pivot: int | None = None) -> list[int]:
    """Pivot-partition rounds, each dispatched as one comparison batch.

    After the top-k set is fixed, order within it comes from a quadratic
    pass over the survivors (repeat comparisons hit the pair cache).
    """
    rng = rng or random.Random(0)
    top: list[int] = []
    live = list(items)
    remaining = k
    use_first_pivot = first_pivot is not None and first_pivot in live
    while live and remaining > 0:
        if remaining >= len(live):
            top.extend(live)
            break
        if use_first_pivot:
            pivot = first_pivot
            use_first_pivot = False
        else:
            pivot = live[rng.randrange(len(live))]
        others = [x for x in live if x != pivot]
        outcomes = comparator.compare_many([(x, pivot) for x in others])
        better, worse = [], []
        for x in others:
            lo, hi = (x, pivot) if x < pivot else (pivot, x)
            (better if outcomes[(lo, hi)].winner == x else worse).append(x)
        if len(better) >= remaining:
            live = better
        elif len(better) == remaining - 1:
            top.extend(better)
            top.append(pivot)
            break
        else:
            top.extend(better)
            top.append(pivot)
            remaining -= len(better) + 1
            live = worse
    return quadratic_topk(top, comparator, len(top))


def _index_pivot(t: Table, criterion: lx.Langex, items: list[int], cfg: TopkConfig) -> int | None:
    """Pivot from similarity rank k+epsilon against the placeholder-free query."""
    indexed_cols = [ph.column for ph in criterion.placeholders if ph.column in t.indexes]
    if not indexed_cols:
        raise IndexPersistenceError(
            "sem-index pivot strategy requires a loaded index on a criterion column"
        )
    index = t.indexes[indexed_cols[0]]
    query_vec = index.embedder.embed([criterion.stripped()])[0]
    member = set(items)
    ranked = [rid for rid, _ in index.search(query_vec, index.row_count) if rid in member]
    if not ranked:
        return None
    epsilon = cfg.pivot_epsilon if cfg.pivot_epsilon is not None else math.ceil(cfg.k / 2)
    rank = min(cfg.k + epsilon, len(ranked)) - 1
    return ranked[rank]


def _run_algorithm(items: list[int], comparator, cfg: TopkConfig,
                   t: Table, criterion: lx.Langex) -> list[int]:
    if not items:
        return []
    if len(items) == 1:
        return list(items)
    if cfg.algorithm == "quadratic":
        return quadratic_topk(items, comparator, cfg.k)
    if cfg.algorithm == "heap":
        return heap_topk(items, comparator, cfg.k)
    first_pivot = None
    if cfg.pivot_strategy == "sem-index":
        first_pivot = _index_pivot(t, criterion, items, cfg)
    return quickselect_topk(items, comparator, cfg.k,
                            rng=random.Random(cfg.pivot_seed), first_pivot=first_pivot)


def sem_topk(t: Table, criterion: lx.Langex, cfg: TopkConfig, backend=None,
             cache: PairCache | None = None, meter: CallMeter | None = None,
             parallelism: int = 64, op_name: str = "sem_topk") -> Table:
    """Best-first min(k, n) rows per group, from pairwise LM comparisons."""
    lx.validate(criterion, t.schema, "single")
    comparator = LmComparator(t, criterion, backend=backend, cascade=cfg.cascade,
                              cache=cache, meter=meter, op=op_name, parallelism=parallelism)
    if cfg.group_by:
        groups = partition_by_equality(t, list(cfg.group_by))
    else:
        groups = [((), list(range(t.row_count)))]
    ordered: list[int] = []
    for _, row_ids in groups:
        ordered.extend(_run_algorithm(row_ids, comparator, cfg, t, criterion))
    return t.select_rows(ordered)
