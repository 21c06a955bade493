import json

from click.testing import CliRunner

from semquery.cli import main


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def papers_csv(tmp_path):
    rows = ["abstract"]
    for i in range(5):
        rows.append('"paper %d reports an accuracy of %d.00%%"' % (i, 50 + i * 10))
    return write(tmp_path / "papers.csv", "\n".join(rows) + "\n")


def test_index_then_search(tmp_path):
    runner = CliRunner()
    csv_path = papers_csv(tmp_path)
    idx_dir = str(tmp_path / "idx")

    result = runner.invoke(main, ["index", csv_path, "abstract", idx_dir])
    assert result.exit_code == 0
    assert "indexed 5 rows" in result.output

    result = runner.invoke(main, ["search", idx_dir, "paper 2 reports an accuracy of 70.00%",
                                  "--k", "1", "--csv", csv_path])
    assert result.exit_code == 0
    assert "paper 2" in result.output


def test_search_output_csv(tmp_path):
    runner = CliRunner()
    csv_path = papers_csv(tmp_path)
    idx_dir = str(tmp_path / "idx")
    out_path = tmp_path / "hits.csv"
    runner.invoke(main, ["index", csv_path, "abstract", idx_dir])
    result = runner.invoke(main, ["search", idx_dir, "accuracy", "--k", "3",
                                  "--csv", csv_path, "--output", str(out_path)])
    assert result.exit_code == 0
    lines = out_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "abstract,score"
    assert len(lines) == 4


def test_index_unknown_column_exits_one(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, ["index", papers_csv(tmp_path), "nope",
                                  str(tmp_path / "idx")])
    assert result.exit_code == 1
    assert "error" in result.output


def test_run_pipeline_success(tmp_path):
    runner = CliRunner()
    csv_path = papers_csv(tmp_path)
    metrics_path = tmp_path / "metrics.json"
    pipeline = write(tmp_path / "pipe.yaml",
                     "inputs:\n"
                     "  papers:\n"
                     "    csv: %s\n"
                     "backends:\n"
                     "  keyed:\n"
                     "    type: keyed_filter\n"
                     "    threshold: 65\n"
                     "default_backend: keyed\n"
                     "output: %s\n"
                     "ops:\n"
                     "  - op: sem_filter\n"
                     "    table: papers\n"
                     "    langex: the {abstract} reports high accuracy\n"
                     % (csv_path, tmp_path / "out.csv"))
    result = runner.invoke(main, ["run", pipeline, "--metrics", str(metrics_path)])
    assert result.exit_code == 0, result.output
    payload = json.loads(metrics_path.read_text(encoding="utf-8"))
    assert payload["total_lm_calls"] == 5
    assert (tmp_path / "out.csv").read_text(encoding="utf-8").count("\n") == 4  # header + 3 rows


def test_run_validation_error_exits_two(tmp_path):
    runner = CliRunner()
    pipeline = write(tmp_path / "bad.yaml",
                     "inputs:\n"
                     "  papers:\n"
                     "    csv: %s\n"
                     "backends:\n"
                     "  keep:\n"
                     "    type: always_true\n"
                     "default_backend: keep\n"
                     "ops:\n"
                     "  - op: sem_filter\n"
                     "    table: papers\n"
                     "    langex: keep {no_such_column}\n" % papers_csv(tmp_path))
    result = runner.invoke(main, ["run", pipeline])
    assert result.exit_code == 2
    assert "validation error" in result.output


def test_run_missing_file_exits_two():
    runner = CliRunner()
    result = runner.invoke(main, ["run", "/nonexistent/pipe.yaml"])
    assert result.exit_code == 2


def test_bench_command_small():
    runner = CliRunner()
    result = runner.invoke(main, ["bench", "--n", "20", "--k", "3", "--trials", "1",
                                  "--algo", "quadratic"])
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert report["results"]["quadratic"]["T=0"]["mean_ndcg_at_k"] == 1.0
    assert report["results"]["quadratic"]["T=0"]["mean_lm_calls"] == 190
