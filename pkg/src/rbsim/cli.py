"""Command-line driver: generate bases, run servers, query, bench, inspect.

The store directory comes from --store or the RBSIM_STORE environment
variable (default ./basis-store).  Desk-scale defaults keep every command
interactive; the full-scale settings from the evaluation write-ups are all
reachable through flags.
"""

import json
import logging
from pathlib import Path

import click

from rbsim.bench import BenchSpec, run_bench
from rbsim.full_problem import Parameter, QualitySpec
from rbsim.generation import NonConvergenceError, TrainingSet, greedy_generate, reorder_generate
from rbsim.middleware import HttpServerChannel, SimulationClient, create_middleware_app
from rbsim.rbm import MODE_NORMALIZED, MODE_ORTHONORMAL, MODES
from rbsim.server import create_server_app
from rbsim.store import BasisStore

log = logging.getLogger(__name__)

STORE_OPTION = click.option(
    "--store", envvar="RBSIM_STORE", default="./basis-store", show_default=True,
    type=click.Path(file_okay=False), help="basis store directory (env: RBSIM_STORE)")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose):
    """Reduced-basis simulation middleware."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@STORE_OPTION
@click.option("--method", type=click.Choice(["greedy", "reorder"]), default="greedy",
              show_default=True)
@click.option("--preset", default="A", show_default=True,
              help="training box: A, B or C")
@click.option("--step", default=4.0, show_default=True,
              help="training grid step per parameter axis")
@click.option("-D", "--discretization", default=32, show_default=True,
              help="grid points per spatial axis")
@click.option("--max-res", default=1e-4, show_default=True,
              help="residual bound the basis must certify on the training set")
@click.option("--mode", type=click.Choice(list(MODES)), default=None,
              help="basis column mode (default: orthonormal for greedy, "
                   "normalized for reorder)")
@click.option("--margin", default=3, show_default=True,
              help="reorder margin a (reorder method only)")
@click.option("--seed", default=0, show_default=True)
@click.option("--stop-n", type=int, default=None,
              help="stop after this many snapshots even if not converged")
def generate(store, method, preset, step, discretization, max_res, mode, margin,
             seed, stop_n):
    """Generate a reduced basis and save it to the store."""
    train = TrainingSet.preset(preset, step)
    quality = QualitySpec(discretization, max_res)
    click.echo(f"training set {preset} (step {step}): {len(train.parameters)} points")
    try:
        if method == "greedy":
            result = greedy_generate(train, quality, seed=seed, stop_n=stop_n,
                                     mode=mode or MODE_ORTHONORMAL)
        else:
            result = reorder_generate(train, margin, quality, seed=seed, stop_n=stop_n,
                                      mode=mode or MODE_NORMALIZED)
    except NonConvergenceError as exc:
        raise click.ClickException(str(exc))
    ident, nbytes = BasisStore(store).save(result.basis)
    click.echo(f"identifier: {ident}")
    click.echo(f"snapshots: {result.basis.n}")
    click.echo(f"converged: {result.log.converged}")
    click.echo(f"file bytes: {nbytes}")


@main.command()
@STORE_OPTION
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8642, show_default=True)
@click.option("--workers", default=2, show_default=True,
              help="generation worker threads")
def serve(store, host, port, workers):
    """Run the basis server (generation, downloads, updates, full solves)."""
    import uvicorn

    app = create_server_app(store, workers=workers)
    click.echo(f"basis server on http://{host}:{port} (store: {store})")
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@STORE_OPTION
@click.option("--identifier", required=True,
              help="basis identifier, or empty-<D>-<mode> to start from nothing")
@click.option("--strategy", type=click.Choice(["basic", "adaptive", "subspace", "reorder"]),
              default="basic", show_default=True)
@click.option("--server", default=None, help="basis server URL (adaptive updates, fetch)")
@click.option("--max-res", default=1.0, show_default=True,
              help="bound when starting from an empty sentinel basis")
@click.option("--ui", type=click.Path(exists=True, file_okay=False), default=None,
              help="static UI directory to serve at /")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8643, show_default=True)
def client(store, identifier, strategy, server, max_res, ui, host, port):
    """Run the middleware client (query endpoint, event stream, UI)."""
    import uvicorn

    channel = HttpServerChannel(server) if server else None
    sim = SimulationClient(BasisStore(store), identifier, strategy,
                           channel=channel, max_res=max_res)
    report = sim.warm_setup()
    click.echo(f"warm setup: n={report['n']} D={report['discretization']} "
               f"bytes={report['bytes_read']}")
    app = create_middleware_app(sim, ui_dir=ui)
    click.echo(f"middleware on http://{host}:{port} (strategy: {strategy})")
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@STORE_OPTION
@click.option("--identifier", required=True)
@click.option("--strategy", type=click.Choice(["basic", "adaptive", "subspace", "reorder"]),
              default="basic", show_default=True)
@click.option("--server", default=None, help="basis server URL")
@click.option("-p", "--parameter", nargs=3, type=float, required=True,
              metavar="DIFF ADVX ADVY")
@click.option("--max-res", type=float, default=None,
              help="per-query bound (default: the basis's own)")
@click.option("--what-if", type=click.Choice(["basic", "subspace", "reorder"]),
              default=None, help="answer with this strategy instead, once")
@click.option("--field-out", type=click.Path(dir_okay=False), default=None,
              help="write the reconstructed field as raw little-endian f64")
def query(store, identifier, strategy, server, parameter, max_res, what_if, field_out):
    """Answer one query from the local store and print its certificate."""
    from rbsim.strategies import Query

    channel = HttpServerChannel(server) if server else None
    sim = SimulationClient(BasisStore(store), identifier, strategy, channel=channel)
    sim.warm_setup()
    mu = Parameter(*parameter)
    answer = sim.handle_query(Query(mu, max_res), strategy=what_if)
    record = sim.ledger[-1]
    sim.close()

    click.echo(f"parameter: {mu}")
    click.echo(f"strategy: {answer.strategy}")
    click.echo(f"residual: {answer.residual_norm:.6e} (bound {record.bound:.6e})")
    click.echo(f"quality_ok: {answer.quality_ok}")
    click.echo(f"snapshots used: {answer.snapshots_used} of {sim.basis.n}")
    click.echo(f"bytes read: {record.bytes_read}")
    if field_out:
        Path(field_out).write_bytes(answer.values.astype("<f8").tobytes())
        click.echo(f"field written: {field_out} ({answer.values.size} values)")


@main.command()
@STORE_OPTION
@click.argument("op", type=click.Choice(["quality", "snapshots", "bytes"]))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="CSV output path")
@click.option("--preset", "presets", multiple=True, default=("A", "B", "C"),
              show_default=True)
@click.option("--step", default=4.0, show_default=True)
@click.option("-D", "--discretization", "discretizations", multiple=True,
              type=int, default=(32,), show_default=True)
@click.option("--snapshot-counts", default=None,
              help="comma-separated prefix sizes (default: all)")
@click.option("--test-size", default=1000, show_default=True)
@click.option("--max-res", default=1e-4, show_default=True)
@click.option("--margin", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def bench(store, op, out, presets, step, discretizations, snapshot_counts,
          test_size, max_res, margin, seed):
    """Run an experiment sweep and write a CSV."""
    counts = None
    if snapshot_counts:
        counts = tuple(int(c) for c in snapshot_counts.split(","))
    spec = BenchSpec(presets=tuple(presets), step=step,
                     discretizations=tuple(discretizations),
                     snapshot_counts=counts, test_size=test_size,
                     max_res=max_res, margin=margin, seed=seed)
    rows = run_bench(op, spec, out, store_dir=Path(store) / "bench")
    click.echo(f"{len(rows)} rows -> {out}")


@main.command()
@STORE_OPTION
@click.argument("target")
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
def inspect(store, target, as_json):
    """Describe a basis container (pass an identifier or a .rbb path)."""
    from rbsim.store import BasisFileReader

    path = Path(target)
    if not path.exists():
        path = BasisStore(store).path_for(target)
    if not path.exists():
        raise click.ClickException(f"no basis at {target!r}")

    with BasisFileReader(path) as reader:
        info = {
            "path": str(path),
            "file_bytes": path.stat().st_size,
            "discretization": reader.discretization,
            "dimension": reader.dimension,
            "n": reader.n,
            "mode": reader.mode,
            "max_res": reader.quality.max_res,
            "operator_thetas": list(reader.theta_a_ids),
            "rhs_thetas": list(reader.theta_f_ids),
            "sections": {name: nbytes for name, (_, nbytes) in reader.sections.items()},
            "snapshot_parameters": [list(p.as_array()) for p in reader.snapshot_params],
        }
    if as_json:
        click.echo(json.dumps(info, indent=2))
        return
    click.echo(f"path: {info['path']} ({info['file_bytes']} bytes)")
    click.echo(f"grid: {info['discretization']}x{info['discretization']} "
               f"(dimension {info['dimension']})")
    click.echo(f"snapshots: {info['n']} ({info['mode']}), max_res {info['max_res']:g}")
    click.echo(f"operator components: {', '.join(info['operator_thetas'])}")
    click.echo(f"rhs components: {', '.join(info['rhs_thetas'])}")
    click.echo("sections:")
    for name, nbytes in info["sections"].items():
        click.echo(f"  {name:<10} {nbytes:>12} bytes")
    for i, vals in enumerate(info["snapshot_parameters"]):
        click.echo(f"  snapshot {i}: diff={vals[0]:g} advx={vals[1]:g} advy={vals[2]:g}")


if __name__ == "__main__":
    main()
