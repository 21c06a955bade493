import pytest

from semquery.agg import (AggConfig, CapacityError, TEMPLATE_OVERHEAD, cluster,
                          fold_reduce, hierarchical_reduce, pack_documents,
                          sem_agg, sem_partition_by)
from semquery.backends import ConstantBackend
from semquery.index import MockEmbedder, sem_index
from semquery.langex import parse
from semquery.runtime import CallMeter, LmResult
from semquery.table import Table

AGGREGATION = parse("Summarize the findings in {finding}")


class RecordingBackend:
    """Constant answers, but every prompt is kept for invariant checks."""

    instant = True
    backend_id = "recording"

    def __init__(self, answer="S"):
        self.answer = answer
        self.prompts = []

    def complete(self, request):
        self.prompts.append(request.user_prompt)
        return LmResult(text=self.answer, backend_id=self.backend_id)


def finding_table(texts, extra_cols=None):
    schema = [("finding", "text")] + [(c, "text") for c in (extra_cols or {})]
    cols = {"finding": list(texts)}
    cols.update(extra_cols or {})
    return Table.from_columns(schema, cols)


def fixed_docs(n, size=100):
    return [(i, ("doc %03d " % i).ljust(size, "x")) for i in range(n)]


def test_pack_documents_counts_separator():
    docs = [(0, "aaaa"), (1, "bbbb"), (2, "cccc")]
    # 4 + 2 + 4 = 10 fits exactly; adding the third (plus separator) would not
    packs = pack_documents(docs, 10)
    assert [[rid for rid, _ in p] for p in packs] == [[0, 1], [2]]


def test_pack_documents_preserves_order():
    docs = fixed_docs(7)
    packs = pack_documents(docs, 310)
    flattened = [rid for pack in packs for rid, _ in pack]
    assert flattened == list(range(7))


def test_pack_documents_single_doc_too_large():
    with pytest.raises(CapacityError) as err:
        pack_documents([(0, "ok"), (5, "x" * 20)], 10)
    assert err.value.row_id == 5


def test_hierarchical_recurrence_50_docs_10_per_pack():
    # capacity fits exactly 10 100-char docs (plus 9 separators), so the leaf
    # level is 5 calls and the 5 one-char partials merge in a single call
    docs = fixed_docs(50, size=100)
    capacity = 10 * 100 + 9 * 2
    meter = CallMeter()
    out = hierarchical_reduce(docs, capacity, RecordingBackend(), meter=meter)
    assert out == "S"
    c = meter.op("sem_agg")
    assert c.lm_calls == 6
    assert c.batches == 2


def test_hierarchical_single_pack_one_call():
    meter = CallMeter()
    hierarchical_reduce(fixed_docs(3), 1000, RecordingBackend(), meter=meter)
    assert meter.op("sem_agg").lm_calls == 1


def test_hierarchical_empty_docs_zero_calls():
    meter = CallMeter()
    assert hierarchical_reduce([], 1000, RecordingBackend(), meter=meter) == ""
    assert meter.total_lm_calls == 0


def test_hierarchical_multi_level_merge():
    # long partial answers force the merge phase itself to recurse
    backend = RecordingBackend(answer="A" * 90)
    meter = CallMeter()
    out = hierarchical_reduce(fixed_docs(8, size=100), 200, backend, meter=meter)
    assert out == "A" * 90
    # 8 leaf packs of 1? capacity 200 holds one 100-char doc plus separator+100 > 200,
    # so leaves pack in pairs: 4 leaf calls, then 90-char partials merge 2 per call
    assert meter.op("sem_agg").lm_calls > 5


def test_fold_sequential_single_item_batches():
    docs = fixed_docs(5, size=100)
    meter = CallMeter()
    backend = RecordingBackend(answer="acc")
    out = fold_reduce(docs, 150, backend, meter=meter)
    assert out == "acc"
    c = meter.op("sem_agg")
    assert c.lm_calls == 5
    assert c.max_batch_size == 1
    # every later prompt carries the running answer
    for prompt in backend.prompts[1:]:
        assert prompt.startswith("Answer so far:\nacc")


def test_fold_long_accumulator_merges_and_advances():
    # a 180-char running answer crowds out the fold header, so each later
    # step merges accumulator and document as plain partials
    backend = RecordingBackend(answer="A" * 180)
    meter = CallMeter()
    docs = [(i, ("d%d" % i).ljust(220, ".")) for i in range(3)]
    out = fold_reduce(docs, 431, backend, meter=meter)
    assert out == "A" * 180
    assert meter.op("sem_agg").lm_calls == 3
    for prompt in backend.prompts:
        assert len(prompt) <= 431


def test_fold_accumulator_overflow_raises():
    backend = RecordingBackend(answer="A" * 180)
    docs = [(i, "x" * 100) for i in range(3)]
    with pytest.raises(CapacityError):
        fold_reduce(docs, 150, backend)


def test_fold_document_too_large():
    with pytest.raises(CapacityError):
        fold_reduce([(0, "x" * 500)], 100, RecordingBackend())


def test_prompts_never_exceed_capacity():
    backend = RecordingBackend()
    t = finding_table([("finding %d " % i).ljust(300, "y") for i in range(40)])
    cfg = AggConfig(max_context_chars=TEMPLATE_OVERHEAD + 1000)
    sem_agg(t, AGGREGATION, cfg, backend)
    assert backend.prompts
    for prompt in backend.prompts:
        assert len(prompt) <= cfg.max_context_chars


def test_sem_agg_single_row_output():
    t = finding_table(["a", "b", "c"])
    out = sem_agg(t, AGGREGATION, AggConfig(), ConstantBackend("the answer"))
    assert out.row_count == 1
    assert out.cell(0, "aggregation") == "the answer"
    assert out.schema == (("aggregation", "text"),)


def test_sem_agg_group_by_one_row_per_group():
    t = finding_table(["a", "b", "c", "d"], extra_cols={"grp": ["x", "y", "x", "z"]})
    out = sem_agg(t, AGGREGATION, AggConfig(group_by=("grp",)), ConstantBackend("ans"))
    assert out.column("grp") == ["x", "y", "z"]
    assert out.column("aggregation") == ["ans"] * 3
    assert out.schema == (("grp", "text"), ("aggregation", "text"))


def test_sem_agg_empty_table():
    t = finding_table([])
    out = sem_agg(t, AGGREGATION, AggConfig(), ConstantBackend("x"))
    assert out.row_count == 1
    assert out.cell(0, "aggregation") == ""


def test_partition_column_never_mixes_leaf_prompts():
    backend = RecordingBackend()
    n = 30
    t = finding_table(["P%d-finding-%02d" % (i % 3, i) for i in range(n)],
                      extra_cols={"part": ["p%d" % (i % 3) for i in range(n)]})
    cfg = AggConfig(partition_column="part", max_context_chars=TEMPLATE_OVERHEAD + 200)
    sem_agg(t, AGGREGATION, cfg, backend)
    for prompt in backend.prompts:
        groups = {text[1] for text in prompt.split() if text.startswith("P") and "-finding-" in text}
        assert len(groups) <= 1


def test_partition_column_each_partition_collapses_first():
    backend = RecordingBackend(answer="partial")
    t = finding_table(["f%d" % i for i in range(6)],
                      extra_cols={"part": ["a", "b", "a", "b", "a", "b"]})
    meter = CallMeter()
    cfg = AggConfig(partition_column="part")
    out = sem_agg(t, AGGREGATION, cfg, backend, meter=meter)
    assert out.row_count == 1
    # one leaf call per partition, then one merge over the two partials
    assert meter.op("sem_agg").lm_calls == 3


def test_sem_partition_by_function():
    t = finding_table(["a", "bb", "ccc", "dddd"])
    out = sem_partition_by(t, lambda i, row: len(row["finding"]) % 2)
    assert out.column("partition_id") == [1, 0, 1, 0]
    assert dict(out.schema)["partition_id"] == "int"


def test_sem_partition_by_cluster(tmp_path):
    t = finding_table(["alpha alpha alpha", "alpha alpha beta",
                       "zeta zeta zeta", "zeta zeta eta"])
    sem_index(t, "finding", tmp_path / "idx", MockEmbedder(64, seed=0))
    out = sem_partition_by(t, cluster(2, "finding"), id_column="partition_id")
    ids = out.column("partition_id")
    assert ids[0] == ids[1] and ids[2] == ids[3] and ids[0] != ids[2]


def test_agg_config_validation():
    with pytest.raises(ValueError):
        AggConfig(pattern="mapreduce")
    with pytest.raises(ValueError):
        AggConfig(max_context_chars=TEMPLATE_OVERHEAD)
