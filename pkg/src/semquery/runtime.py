"""LM backend contract, batch scheduler, call metering, and the pair cache.

Backends expose ``complete(request) -> LmResult`` and must be safe for
concurrent invocation up to the scheduler's parallelism. Backends that set
``instant = True`` (all deterministic mocks) are dispatched serially without
a thread pool; results are positionally aligned with requests either way.
"""
from __future__ import annotations

import hashlib
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import BackendError

MAX_ATTEMPTS = 3
BACKOFF_INITIAL_S = 0.5


@dataclass(frozen=True)
class LmRequest:
    system_instruction: str
    user_prompt: str
    label_set: tuple[str, ...] | None = None
    demonstrations: tuple[tuple[str, str], ...] | None = None
    max_output_chars: int = 4096

    def __post_init__(self):
        if self.label_set is not None and len(set(self.label_set)) < 2:
            raise ValueError("label_set needs >= 2 distinct labels")


@dataclass(frozen=True)
class LmResult:
    text: str
    label_logprobs: dict[str, float] | None = None
    backend_id: str = ""
    error: str | None = None


@dataclass
class OpCounters:
    lm_calls: int = 0
    batches: int = 0
    proxy_calls: int = 0
    oracle_calls: int = 0
    cache_hits: int = 0
    malformed_outputs: int = 0
    max_batch_size: int = 0
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {
            "lm_calls": self.lm_calls,
            "batches": self.batches,
            "proxy_calls": self.proxy_calls,
            "oracle_calls": self.oracle_calls,
            "cache_hits": self.cache_hits,
            "malformed_outputs": self.malformed_outputs,
            "max_batch_size": self.max_batch_size,
            "wall_time": round(self.wall_time, 6),
        }


class CallMeter:
    """Race-free per-operator counters; counters are monotone within a run."""

    def __init__(self):
        self._lock = threading.Lock()
        self._ops: dict[str, OpCounters] = {}

    def _get(self, op: str) -> OpCounters:
        if op not in self._ops:
            self._ops[op] = OpCounters()
        return self._ops[op]

    def record_batch(self, op: str, n_calls: int, role: str | None = None) -> None:
        with self._lock:
            c = self._get(op)
            c.lm_calls += n_calls
            c.batches += 1
            c.max_batch_size = max(c.max_batch_size, n_calls)
            if role == "proxy":
                c.proxy_calls += n_calls
            elif role == "oracle":
                c.oracle_calls += n_calls

    def record_cache_hit(self, op: str, n: int = 1) -> None:
        with self._lock:
            self._get(op).cache_hits += n

    def record_malformed(self, op: str, n: int = 1) -> None:
        with self._lock:
            self._get(op).malformed_outputs += n

    def add_wall_time(self, op: str, seconds: float) -> None:
        with self._lock:
            self._get(op).wall_time += seconds

    def op(self, op: str) -> OpCounters:
        with self._lock:
            return self._get(op)

    def snapshot(self) -> dict:
        with self._lock:
            return {op: c.as_dict() for op, c in sorted(self._ops.items())}

    @property
    def total_lm_calls(self) -> int:
        with self._lock:
            return sum(c.lm_calls for c in self._ops.values())


def _complete_with_retries(backend, request: LmRequest) -> LmResult:
    delay = BACKOFF_INITIAL_S
    last = None
    for attempt in range(MAX_ATTEMPTS):
        try:
            return backend.complete(request)
        except Exception as exc:  # transport failure: retry with backoff
            last = exc
            if attempt < MAX_ATTEMPTS - 1:
                time.sleep(delay)
                delay *= 2
    return LmResult(text="", backend_id=getattr(backend, "backend_id", "?"), error=str(last))


def complete_batch(
    backend,
    requests: list[LmRequest],
    parallelism: int = 64,
    meter: CallMeter | None = None,
    op: str = "lm",
    role: str | None = None,
) -> list[LmResult]:
    """Dispatch one batch; results are positionally aligned with requests.

    Per-item failures become error results and do not abort the batch. The
    meter is incremented by len(requests) calls and one batch.
    """
    if not requests:
        raise ValueError("empty batch")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    start = time.perf_counter()
    if getattr(backend, "instant", False) or parallelism == 1 or len(requests) == 1:
        results = [_complete_with_retries(backend, r) for r in requests]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(lambda r: _complete_with_retries(backend, r), requests))
    if meter is not None:
        meter.record_batch(op, len(requests), role=role)
        meter.add_wall_time(op, time.perf_counter() - start)
    return results


def label_confidence(r: LmResult) -> tuple[str, float]:
    """Chosen label and its normalized exponentiated log-probability.

    Ties break toward the earliest label in the request's label order, which
    the backend must preserve in the mapping.
    """
    if not r.label_logprobs:
        raise BackendError("result carries no label log-probabilities")
    labels = list(r.label_logprobs)
    weights = [math.exp(r.label_logprobs[lab]) for lab in labels]
    total = sum(weights)
    if total <= 0:
        raise BackendError("degenerate label log-probabilities: %r" % r.label_logprobs)
    best = max(range(len(labels)), key=lambda i: (weights[i], -i))
    return labels[best], weights[best] / total


@dataclass(frozen=True)
class KeyedOracleConfig:
    key_column: str = "key"
    temperature: float = 0.0
    seed: int = 0


def _pair_rng(seed: int, key_lo: float, key_hi: float) -> random.Random:
    # Stream identity from (seed, unordered pair) only, never arrival order.
    digest = hashlib.sha256(("%d|%r|%r" % (seed, key_lo, key_hi)).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def keyed_compare(cfg: KeyedOracleConfig, key_i: float, key_j: float) -> LmResult:
    """Deterministic pairwise comparison from hidden numeric keys.

    Answers "Document 1"/"Document 2" with P(correct) = sigmoid(|Δkey|/T);
    T=0 is always correct. Identical (seed, unordered pair) inputs yield the
    same winner regardless of operand order.
    """
    gap = abs(key_i - key_j)
    if cfg.temperature <= 0:
        p_correct = 1.0
        higher_wins = True
    else:
        p_correct = 1.0 / (1.0 + math.exp(-gap / cfg.temperature))
        rng = _pair_rng(cfg.seed, min(key_i, key_j), max(key_i, key_j))
        higher_wins = rng.random() < p_correct
    first_is_higher = key_i >= key_j
    chosen_first = first_is_higher == higher_wins
    label = "Document 1" if chosen_first else "Document 2"
    p = max(min(p_correct, 1.0), 0.0)
    lp_chosen = math.log(p) if p > 0 else -math.inf
    lp_other = math.log(1.0 - p) if p < 1.0 else -math.inf
    logprobs = {
        "Document 1": lp_chosen if chosen_first else lp_other,
        "Document 2": lp_other if chosen_first else lp_chosen,
    }
    return LmResult(text=label, label_logprobs=logprobs, backend_id="keyed-oracle")


class PairCache:
    """Winner cache keyed by (unordered row pair, criterion hash)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._store: dict[tuple, int] = {}

    @staticmethod
    def _key(pair: tuple[int, int], criterion_hash: str) -> tuple:
        a, b = pair
        return (min(a, b), max(a, b), criterion_hash)

    def lookup(self, pair: tuple[int, int], criterion_hash: str) -> int | None:
        with self._lock:
            return self._store.get(self._key(pair, criterion_hash))

    def store(self, pair: tuple[int, int], criterion_hash: str, winner: int) -> None:
        with self._lock:
            self._store[self._key(pair, criterion_hash)] = winner

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


def criterion_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
