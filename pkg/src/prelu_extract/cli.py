"""Command-line entry point: gen, serve, extract, evaluate, bench."""

import json
import logging
import math
import sys
import time
from typing import List, Optional

import click
import numpy as np

from . import network as nw
from .critical_search import ExpansivenessError
from .evaluation import evaluate as evaluate_nets
from .oracle import FeedbackMode, Oracle, RemoteOracle, serve_stream, serve_tcp
from .orchestrator import AttackConfig, ExtractionError, extract as run_extract

MODES = [m.value for m in FeedbackMode]


def log2(v) -> Optional[float]:
    if v is None or not isinstance(v, (int, float)) or isinstance(v, bool):
        return None
    if v == 0:
        return -math.inf
    return math.log2(abs(v))


def fmt_log2(v) -> str:
    p = log2(v)
    if p is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if p == -math.inf:
        return "0"
    return "2^%.2f" % p


def check_feedback(feedback: str, m: Optional[int], n_outputs: Optional[int] = None) -> None:
    """Flag combinations that cannot work; raised before any oracle is built."""
    if feedback == "topm" and m is None:
        raise click.UsageError("--feedback topm needs --m")
    if feedback != "topm" and m is not None:
        raise click.UsageError("--m is only valid with --feedback topm")
    if n_outputs is not None:
        if feedback == "sigmoid" and n_outputs != 1:
            raise click.UsageError("sigmoid feedback needs a single-output model")
        if feedback in ("softmax", "topm") and n_outputs < 2:
            raise click.UsageError("score feedback needs at least two outputs")
        if feedback == "topm" and not 2 <= m <= n_outputs:
            raise click.UsageError("--m must lie in [2, %d]" % n_outputs)


def reference_net(net: nw.PReluNetwork, feedback: str, pivot: int) -> nw.PReluNetwork:
    return nw.fuse_outputs(net, pivot) if feedback in ("softmax", "topm") else net


def run_one(net: Optional[nw.PReluNetwork], oracle, dims: List[int], feedback: str, cfg: AttackConfig,
            samples: int = 10_000, eval_seed: int = 0):
    """Extraction plus evaluation as one report dictionary; failures are reported, not raised."""
    report = {"config": {"dims": "-".join(map(str, dims)), "feedback": feedback, "m": oracle.m,
                         "workflow": cfg.workflow, "seed": cfg.seed, "budget": cfg.budget,
                         "max_queries": cfg.max_queries, "refine_rounds": cfg.refine_rounds,
                         "eval_samples": samples, "eval_seed": eval_seed, "domain": [-1.0, 1.0]}}
    t0 = time.perf_counter()
    recovered = None
    try:
        res = run_extract(oracle, dims, cfg)
    except ExpansivenessError as err:
        report.update(status="failed", failure={"kind": "expansiveness", "phase": "setup", "message": str(err)},
                      queries=oracle.query_count, phase_counts=oracle.phase_counts)
    except ExtractionError as err:
        report.update(status="failed", failure={"kind": err.kind, "phase": err.phase, "message": str(err)},
                      queries=oracle.query_count, phase_counts=oracle.phase_counts)
    else:
        recovered = res.network
        report.update(status="ok", queries=res.queries, phase_counts=res.phase_counts,
                      diagnostics=res.diagnostics, refinement_failures=res.refinement.failures)
        if net is not None:
            ev = evaluate_nets(reference_net(net, feedback, cfg.pivot), recovered, n=samples, seed=eval_seed)
            report.update(epsilon=ev.epsilon, bound=ev.bound, max_param_error=ev.max_param_error,
                          max_slope_error=ev.max_slope_error)
    report["wall_time"] = time.perf_counter() - t0
    return report, recovered


def report_table(rows: List[dict]) -> str:
    head = ["arch", "feedback", "wf", "status", "queries", "epsilon", "max|θ-θ̂|", "bound", "time(s)"]
    lines = []
    for r in rows:
        c = r["config"]
        fb = c["feedback"] + ("(%d)" % c["m"] if c.get("m") else "")
        lines.append([c["dims"], fb, str(c["workflow"]), r["status"], fmt_log2(r.get("queries")),
                      fmt_log2(r.get("epsilon")), fmt_log2(r.get("max_param_error")), fmt_log2(r.get("bound")),
                      "%.1f" % r["wall_time"]])
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
    out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    out += ["  ".join(v.ljust(w) for v, w in zip(l, widths)) for l in lines]
    for r in rows:
        if r["status"] != "ok":
            f = r["failure"]
            out.append("%s: %s failure in %s (%s)" % (r["config"]["dims"], f["kind"], f["phase"], f["message"]))
    return "\n".join(out)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(obj, path: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, default=_json_default)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


def parse_slopes(text: str):
    try:
        lo, hi = (float(t) for t in text.split(":"))
    except ValueError:
        raise click.BadParameter("expected LO:HI, e.g. 0.05:0.95")
    return lo, hi


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int):
    """Black-box extraction of PReLU fully-connected networks."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--dims", required=True, help="Architecture, e.g. 32-16-1.")
@click.option("--slopes", default="0.05:0.95", show_default=True, help="Slope range LO:HI inside (0, 1).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--decimal", is_flag=True, help="Write 17-digit decimals instead of exact hex floats.")
def gen(dims, slopes, seed, out, decimal):
    """Write a random victim model file."""
    try:
        net = nw.random_network(nw.parse_dims(dims), slope_range=parse_slopes(slopes), seed=seed)
    except ValueError as err:
        raise click.BadParameter(str(err))
    nw.save(net, out, decimal=decimal)
    click.echo("wrote %s (%s, %d parameters)" % (out, dims, net.parameter_count()))


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--feedback", type=click.Choice(MODES), default="raw", show_default=True)
@click.option("--m", type=int, default=None, help="Number of labels shown under topm feedback.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=0, show_default=True, help="0 picks a free port.")
@click.option("--stdio", is_flag=True, help="Serve requests on stdin/stdout instead of TCP.")
@click.option("--limit", type=int, default=None, help="Total query budget.")
def serve(model, feedback, m, host, port, stdio, limit):
    """Answer oracle queries over the line protocol."""
    net = nw.load(model)
    check_feedback(feedback, m, net.n_outputs)
    oracle = Oracle(net, feedback, m=m, limit=limit)
    if stdio:
        serve_stream(oracle, sys.stdin, sys.stdout)
        return

    class _Ready:
        port = None

        def set(self):
            click.echo("serving %s on %s:%d" % (model, host, self.port), err=True)

    serve_tcp(oracle, host, port, ready=_Ready())


def _config(workflow, seed, budget, max_queries, refine_rounds, pivot) -> AttackConfig:
    try:
        return AttackConfig(workflow=workflow, seed=seed, budget=budget, max_queries=max_queries,
                            refine_rounds=refine_rounds, pivot=pivot)
    except ValueError as err:
        raise click.UsageError(str(err))


@main.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), help="In-process victim model file.")
@click.option("--remote", default=None, help="HOST:PORT of a running serve command.")
@click.option("--dims", default=None, help="Architecture (required with --remote).")
@click.option("--feedback", type=click.Choice(MODES), default="raw", show_default=True)
@click.option("--m", type=int, default=None)
@click.option("--workflow", type=click.Choice(["1", "2"]), default="2", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--budget", type=float, default=3.0, show_default=True,
              help="Witnesses per layer as a multiple of d log2 d.")
@click.option("--max-queries", type=int, default=None, help="Abort once this many queries are spent.")
@click.option("--refine-rounds", type=int, default=3, show_default=True)
@click.option("--pivot", type=int, default=0, show_default=True, help="Pivot label for score feedback.")
@click.option("--samples", type=int, default=10_000, show_default=True, help="Evaluation sample count.")
@click.option("--eval-seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON report path (stdout if omitted).")
@click.option("--save-model", type=click.Path(dir_okay=False), default=None, help="Write the recovered network.")
def extract(model, remote, dims, feedback, m, workflow, seed, budget, max_queries, refine_rounds, pivot, samples,
            eval_seed, out, save_model):
    """Run the extraction attack and report ε, parameter error and queries."""
    if (model is None) == (remote is None):
        raise click.UsageError("give exactly one of --model and --remote")
    if remote is not None and dims is None:
        raise click.UsageError("--remote needs --dims")
    cfg = _config(int(workflow), seed, budget, max_queries, refine_rounds, pivot)
    net = None
    if model is not None:
        net = nw.load(model)
        arch = list(net.dims)
        if dims is not None and nw.parse_dims(dims) != arch:
            raise click.UsageError("--dims %s does not match the model (%s)" % (dims, "-".join(map(str, arch))))
    else:
        arch = nw.parse_dims(dims)
    check_feedback(feedback, m, arch[-1])
    if feedback in ("softmax", "topm") and not 0 <= pivot < arch[-1]:
        raise click.UsageError("--pivot out of range")
    if net is not None:
        oracle = Oracle(net, feedback, m=m)
    else:
        host, _, port = remote.rpartition(":")
        oracle = RemoteOracle(host, int(port), arch[0], arch[-1], feedback, m=m)
    report, recovered = run_one(net, oracle, arch, feedback, cfg, samples, eval_seed)
    if recovered is not None and save_model:
        nw.save(recovered, save_model)
        report["model"] = save_model
    write_json(report, out)
    click.echo(report_table([report]), err=out is None)
    if report["status"] != "ok":
        sys.exit(2)


@main.command()
@click.option("--true", "true_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--recovered", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fuse-pivot", type=int, default=None, help="Compare against the true model fused at this label.")
@click.option("--samples", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def evaluate(true_path, recovered, fuse_pivot, samples, seed, out):
    """Compare two model files: ε, propagated bound, aligned parameter error."""
    true = nw.load(true_path)
    if fuse_pivot is not None:
        true = nw.fuse_outputs(true, fuse_pivot)
    rec = nw.load(recovered)
    try:
        rep = evaluate_nets(true, rec, n=samples, seed=seed)
    except ValueError as err:
        raise click.UsageError(str(err))
    write_json(rep.to_dict(), out)


BENCHES = {
    "table2-desk": [(d, "raw", None, wf) for d in ("32-16-1", "64-32-1", "20-10-10-1", "32-16-16-1")
                    for wf in (1, 2)],
    "table3": [("20-10-10-1", "raw", None, wf) for wf in (1, 2)],
    "table4": [("32-16-1", "sigmoid", None, 2), ("20-10-10-1", "sigmoid", None, 2)],
    "table5": [("20-10-10", "softmax", None, 2)] + [("20-10-10", "topm", m, 2) for m in range(2, 11)],
}


@main.command()
@click.argument("name", type=click.Choice(sorted(BENCHES) + ["table1"]))
@click.option("--seed", type=int, default=7, show_default=True, help="Victim seed.")
@click.option("--attack-seed", type=int, default=1, show_default=True)
@click.option("--samples", type=int, default=10_000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON report path.")
def bench(name, seed, attack_seed, samples, out):
    """Run a named experiment matrix and print a log2-formatted table."""
    if name == "table1":
        _bench_wiggle(seed, attack_seed, out)
        return
    rows = []
    for dims, feedback, m, wf in BENCHES[name]:
        arch = nw.parse_dims(dims)
        net = nw.random_network(arch, seed=seed)
        oracle = Oracle(net, feedback, m=m)
        report, _ = run_one(net, oracle, arch, feedback, AttackConfig(workflow=wf, seed=attack_seed), samples)
        rows.append(report)
        click.echo(report_table([report]).splitlines()[1], err=True)
    if out:
        write_json(rows, out)
    click.echo(report_table(rows))


def _bench_wiggle(seed, attack_seed, out):
    from .wiggle_baseline import compare_signs

    net = nw.random_network([196, 50, 50, 1], slope_range=(0.9, 0.999999), seed=seed)
    oracle = Oracle(net)
    rows = []
    for layer in (1, 2):
        c = compare_signs(oracle, net, layer, seed=attack_seed)
        n = net.dims[layer]
        rows.append({"layer": layer, "wiggle_correct": n - c.wiggle_errors, "wiggle_wrong": c.wiggle_errors,
                     "joint_correct": n - c.joint_errors, "joint_wrong": c.joint_errors})
    if out:
        write_json(rows, out)
    click.echo("196-50-50-1, slopes in (0.9, 1), true prefix; wiggle is the baseline (sketch)")
    click.echo("layer  wiggle ok/wrong  joint ok/wrong")
    for r in rows:
        click.echo("%-5d  %d / %-11d  %d / %d" % (r["layer"], r["wiggle_correct"], r["wiggle_wrong"],
                                                  r["joint_correct"], r["joint_wrong"]))


if __name__ == "__main__":
    main()
