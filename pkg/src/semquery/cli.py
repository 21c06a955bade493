"""Command-line entry points: index building, pipeline runs, search, bench.

Exit codes: 0 success, 2 validation failure, 1 runtime failure.
"""
from __future__ import annotations

import json
import sys

import click

from .bench import bench_ranking
from .errors import PipelineValidationError, SemQueryError
from .index import MockEmbedder, load_sem_index, sem_index
from .index import sem_search as _sem_search
from .pipeline import PipelineSpec, run_pipeline
from .table import load_csv, write_csv


@click.group()
def main():
    """Semantic query engine over CSV tables."""


@main.command("index")
@click.argument("csv_path", type=click.Path(exists=True))
@click.argument("column")
@click.argument("directory", type=click.Path())
@click.option("--dim", default=64, show_default=True, help="Embedding dimension.")
@click.option("--seed", default=0, show_default=True, help="Embedder seed.")
def index_cmd(csv_path, column, directory, dim, seed):
    """Build a similarity index over COLUMN of CSV_PATH into DIRECTORY."""
    try:
        table = load_csv(csv_path)
        built = sem_index(table, column, directory, MockEmbedder(dimension=dim, seed=seed))
    except SemQueryError as exc:
        click.echo("error: %s" % exc, err=True)
        sys.exit(1)
    click.echo("indexed %d rows of %r into %s" % (built.row_count, column, directory))


@main.command("run")
@click.argument("pipeline_file", type=click.Path(exists=True))
@click.option("--metrics", "metrics_path", type=click.Path(), default=None,
              help="Write run metrics JSON here (default: stdout).")
def run_cmd(pipeline_file, metrics_path):
    """Validate and execute the pipeline described by PIPELINE_FILE."""
    try:
        spec = PipelineSpec.from_file(pipeline_file)
        result, metrics = run_pipeline(spec)
    except PipelineValidationError as exc:
        click.echo("validation error: %s" % exc, err=True)
        sys.exit(2)
    except SemQueryError as exc:
        click.echo("runtime error: %s" % exc, err=True)
        sys.exit(1)
    if metrics_path:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(metrics.to_json() + "\n")
    else:
        click.echo(metrics.to_json())
    click.echo("result rows: %d" % result.row_count, err=True)


@main.command("search")
@click.argument("directory", type=click.Path(exists=True))
@click.argument("query")
@click.option("--k", default=10, show_default=True, help="Number of results.")
@click.option("--csv", "csv_path", type=click.Path(exists=True), required=True,
              help="Source CSV the index was built from.")
@click.option("--dim", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--output", type=click.Path(), default=None,
              help="Write results as CSV instead of printing.")
def search_cmd(directory, query, k, csv_path, dim, seed, output):
    """Top-k rows of the indexed column most similar to QUERY."""
    try:
        with open(f"{directory}/manifest", encoding="utf-8") as fh:
            column = json.load(fh)["column"]
        table = load_csv(csv_path)
        load_sem_index(table, column, directory, MockEmbedder(dimension=dim, seed=seed))
        result = _sem_search(table, column, query, k, return_scores=True)
    except (OSError, SemQueryError, KeyError, json.JSONDecodeError) as exc:
        click.echo("error: %s" % exc, err=True)
        sys.exit(1)
    if output:
        write_csv(result, output)
    else:
        for i in range(result.row_count):
            click.echo("%.4f\t%s" % (result.cell(i, "score"), result.cell(i, column)))


@main.command("bench")
@click.option("--n", default=200, show_default=True, help="Corpus size.")
@click.option("--k", default=10, show_default=True)
@click.option("--trials", default=20, show_default=True)
@click.option("--noise", multiple=True, type=float, default=(0.0,), show_default=True,
              help="Comparison noise temperature(s).")
@click.option("--algo", multiple=True, default=("quadratic", "heap", "quickselect"),
              show_default=True, help="Ranking algorithm(s).")
@click.option("--seed", default=0, show_default=True)
def bench_cmd(n, k, trials, noise, algo, seed):
    """Run the hidden-key ranking benchmark with the deterministic mock LM."""
    report = bench_ranking(algorithms=algo, noise_temperatures=noise,
                           trials=trials, n=n, k=k, seed=seed)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
