"""Semantic query operators over tabular data.

Relational-style operators (filter, map, extract, top-k, join, aggregate,
similarity search/cluster) whose per-row logic is evaluated by a language
model against parameterized natural-language expressions, with batched
dispatch, model cascades, budgeted join approximations, and deterministic
mock backends for offline verification.
"""
from .agg import AggConfig, ClusterPartition, cluster, sem_agg, sem_partition_by
from .backends import (ConstantBackend, EchoBackend, EqualityFilterBackend,
                       FnBackend, HttpChatBackend, KeyedCompareBackend,
                       KeyedFilterBackend, ScriptedBackend)
from .bench import bench_ranking, gen_bench, ndcg_at_k
from .errors import (BackendError, BudgetError, IndexPersistenceError,
                     LangexSyntaxError, LangexValidationError, NullCellError,
                     PipelineValidationError, SchemaError, SemQueryError)
from .index import (MockEmbedder, SimIndex, load_sem_index, sem_cluster_by,
                    sem_index, sem_search, sem_sim_join)
from .join import JoinConfig, sem_join
from .langex import Langex, parse, render, unparse, validate
from .pipeline import PipelineSpec, RunMetrics, run_pipeline
from .rowops import CascadeConfig, sem_extract, sem_filter, sem_map
from .runtime import (CallMeter, KeyedOracleConfig, LmRequest, LmResult,
                      PairCache, complete_batch, keyed_compare, label_confidence)
from .table import Table, load_csv, partition_by_equality, write_csv
from .topk import (ComparisonOutcome, FunctionComparator, LmComparator,
                   TopkConfig, heap_topk, quadratic_topk, quickselect_topk,
                   sem_topk)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
