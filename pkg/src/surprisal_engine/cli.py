"""Command-line interface.

A store and its model live together in one self-describing engine file.
Every verb emits deterministic JSON (sorted keys) embedding the engine
version, the store snapshot id and the seed used.  Exit codes: 0 success,
1 usage, 2 data/schema, 3 numeric/convergence.
"""

from __future__ import annotations

import json
import pickle
import sys

import click
import numpy as np

from . import __version__
from .schema import CaseStore, SchemaError, store_from_csv
from .analyze import UncertaintyModel, analyze as run_analyze
from .react import react as run_react
from .aggregate import react_aggregate
from . import anomaly as anomaly_mod
from . import insight as insight_mod
from . import lifecycle as lifecycle_mod
from . import series as series_mod
from . import synth as synth_mod


def _load(path):
    with open(path, "rb") as fh:
        doc = pickle.load(fh)
    store = CaseStore.from_json(doc["store"])
    model = UncertaintyModel.from_dict(doc["model"]) \
        if doc.get("model") else None
    return store, model


def _save(path, store, model):
    doc = {"format": "surprisal-engine", "version": __version__,
           "store": store.to_json(),
           "model": model.to_dict() if model else None}
    with open(path, "wb") as fh:
        pickle.dump(doc, fh)


def _emit(payload, store, seed, out):
    doc = dict(payload)
    doc["engine_version"] = __version__
    doc["snapshot"] = store.version if store is not None else None
    doc["seed"] = seed
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      default=_json_default)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


@click.group()
@click.option("--seed", default=0, type=int, help="global random seed")
@click.option("--threads", default=1, type=int,
              help="worker threads (advisory)")
@click.option("--config", default=None, help="JSON config overrides")
@click.option("--out", default=None, help="write JSON output to a file")
@click.pass_context
def cli(ctx, seed, threads, config, out):
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["threads"] = threads
    ctx.obj["config"] = json.loads(config) if config else {}
    ctx.obj["out"] = out


@cli.command()
@click.option("--data", required=True, help="CSV file of cases")
@click.option("--store", "store_path", required=True)
@click.option("--ablate", is_flag=True,
              help="ablate redundant cases after warm-up")
@click.pass_context
def train(ctx, data, store_path, ablate):
    """Ingest CSV data into a store."""
    import os
    if os.path.exists(store_path):
        store, model = _load(store_path)
        from .schema import read_csv
        header, rows = read_csv(data)
        cases = [dict(zip(header, r)) for r in rows]
        if ablate and model is not None:
            policy = lifecycle_mod.AblationPolicy(
                **ctx.obj["config"].get("ablation", {}))
            rng = np.random.default_rng(ctx.obj["seed"])
            results = {"trained": 0, "ablated": 0}
            for case in cases:
                status, _ = lifecycle_mod.train_with_ablation(
                    store, model, case, policy=policy, rng=rng)
                results[status] += 1
            rejections = []
        else:
            count, rejections = store.train(cases)
            results = {"trained": count, "ablated": 0}
    else:
        store, rejections = store_from_csv(data)
        model = None
        results = {"trained": len(store), "ablated": 0}
    _save(store_path, store, model)
    _emit({"verb": "train", **results,
           "rejections": [[i, r] for i, r in rejections]},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--targets", default=None,
              help="comma-separated targets for influence analysis")
@click.option("--grid-search", is_flag=True)
@click.pass_context
def analyze(ctx, store_path, targets, grid_search):
    """Run uncertainty analysis and persist the model."""
    store, _ = _load(store_path)
    tl = targets.split(",") if targets else None
    model = run_analyze(store, targets=tl, grid_search=grid_search,
                        seed=ctx.obj["seed"],
                        **ctx.obj["config"].get("analyze", {}))
    _save(store_path, store, model)
    _emit({"verb": "analyze", "converged": model.converged,
           "iterations": model.iterations,
           "residuals": model.residuals},
          store, ctx.obj["seed"], ctx.obj["out"])


def _require_model(model):
    if model is None:
        raise SchemaError("store has no analyzed model; run analyze first")


@cli.command("react")
@click.option("--store", "store_path", required=True)
@click.option("--context", required=True, help="JSON context values")
@click.option("--actions", required=True, help="comma-separated features")
@click.option("--mode", default="discriminative",
              type=click.Choice(["discriminative", "generative"]))
@click.option("--conviction", default=1.0, type=float)
@click.pass_context
def react_cmd(ctx, store_path, context, actions, mode, conviction):
    """Predict or generate action features for a context."""
    store, model = _load(store_path)
    _require_model(model)
    rng = np.random.default_rng(ctx.obj["seed"])
    rx = run_react(store.snapshot(), model, json.loads(context),
                   actions.split(","), mode=mode, conviction=conviction,
                   rng=rng, details=True)
    _emit({"verb": "react", "values": rx.values,
           "residuals": rx.residuals, "details": rx.details},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command("react-aggregate")
@click.option("--store", "store_path", required=True)
@click.option("--target", required=True)
@click.option("--holdout", default="loo-bootstrap")
@click.option("--n", "n_draws", default=500, type=int)
@click.pass_context
def react_aggregate_cmd(ctx, store_path, target, holdout, n_draws):
    """Bootstrap leave-one-out scoring of a target."""
    store, model = _load(store_path)
    _require_model(model)
    metrics = react_aggregate(store, model, target, n_draws=n_draws,
                              seed=ctx.obj["seed"])
    _emit({"verb": "react-aggregate", **metrics},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command("react-series")
@click.option("--store", "store_path", required=True)
@click.option("--history", required=True, help="JSON list of case dicts")
@click.option("--horizon", default=10, type=int)
@click.option("--mode", default="discriminative")
@click.option("--samples", default=1, type=int)
@click.pass_context
def react_series_cmd(ctx, store_path, history, horizon, mode, samples):
    """Forecast a series forward from the provided history."""
    store, model = _load(store_path)
    _require_model(model)
    rng = np.random.default_rng(ctx.obj["seed"])
    steps = series_mod.react_series(
        store, model, json.loads(history), horizon, mode=mode,
        n_samples=samples, rng=rng)
    _emit({"verb": "react-series", "steps": steps},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.pass_context
def anomalies(ctx, store_path):
    """Cluster the store and report per-case convictions."""
    store, model = _load(store_path)
    _require_model(model)
    rng = np.random.default_rng(ctx.obj["seed"])
    result = anomaly_mod.detect_anomalies(
        store.snapshot(), model.spec, rng=rng,
        **ctx.obj["config"].get("anomaly", {}))
    _emit({"verb": "anomalies",
           "labels": result["labels"].tolist(),
           "similarity_conviction":
               result["similarity_conviction"].tolist(),
           "min_conviction": result["min_conviction"].tolist(),
           "flagged": result["flagged"].tolist()},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--features", default=None)
@click.option("--threshold", default=insight_mod.EDGE_THRESHOLD_NATS,
              type=float)
@click.pass_context
def causal(ctx, store_path, features, threshold):
    """Report contribution asymmetries and suggested edges."""
    store, model = _load(store_path)
    _require_model(model)
    rng = np.random.default_rng(ctx.obj["seed"])
    feats = features.split(",") if features else None
    result = insight_mod.causal_asymmetries(
        store.snapshot(), model, features=feats, rng=rng,
        threshold=threshold)
    _emit({"verb": "causal",
           "iaac": {"%s->%s" % k: v for k, v in result["iaac"].items()},
           "mcr": result["mcr"],
           "edges": result["edges"]},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--target", required=True)
@click.option("--kind", default="accuracy",
              type=click.Choice(["accuracy", "prediction"]))
@click.pass_context
def contributions(ctx, store_path, target, kind):
    """Feature contributions for one target."""
    store, model = _load(store_path)
    _require_model(model)
    rng = np.random.default_rng(ctx.obj["seed"])
    view = store.snapshot()
    if kind == "accuracy":
        ac, rr = insight_mod.accuracy_contributions(
            view, model.spec, target, rng=rng)
        payload = {"accuracy_contributions": ac, "robust_residual": rr}
    else:
        dpc, apc = insight_mod.prediction_contributions(
            view, model.spec, target, rng=rng)
        payload = {"directional": dpc, "absolute": apc}
    _emit({"verb": "contributions", "target": target, **payload},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--n", "n_cases", default=100, type=int)
@click.option("--mode", default="conviction",
              type=click.Choice(["conviction", "dp"]))
@click.option("--conviction", default=1.0, type=float)
@click.option("--epsilon", default=1.0, type=float)
@click.option("--anonymity", default="off")
@click.option("--csv-out", default=None)
@click.option("--override-budget", is_flag=True)
@click.pass_context
def synth(ctx, store_path, n_cases, mode, conviction, epsilon, anonymity,
          csv_out, override_budget):
    """Generate synthetic cases and an audit report."""
    store, model = _load(store_path)
    _require_model(model)
    config = synth_mod.SynthConfig(
        mode=mode, conviction=conviction, epsilon=epsilon,
        anonymity=anonymity, seed=ctx.obj["seed"],
        **ctx.obj["config"].get("synth", {}))
    ledger = synth_mod.BudgetLedger(store_path + ".budget") \
        if mode == "dp" else None
    cases, report = synth_mod.synthesize_dataset(
        store, model, n_cases, config=config, ledger=ledger,
        override_budget=override_budget)
    if csv_out:
        import csv as csv_lib
        names = [f.name for f in store.features if not f.derived]
        with open(csv_out, "w", newline="") as fh:
            w = csv_lib.writer(fh)
            w.writerow(names)
            for c in cases:
                w.writerow([c.get(n, "") for n in names])
    _emit({"verb": "synth", "report": report,
           "cases": None if csv_out else cases},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--target-fraction", default=None, type=float)
@click.option("--batch-size", default=64, type=int)
@click.pass_context
def reduce(ctx, store_path, target_fraction, batch_size):
    """Batch-reduce the store, conserving probability mass."""
    store, model = _load(store_path)
    _require_model(model)
    kwargs = dict(ctx.obj["config"].get("ablation", {}))
    if target_fraction is not None:
        kwargs["reduction_target_fraction"] = target_fraction
    kwargs["batch_size"] = batch_size
    policy = lifecycle_mod.AblationPolicy(**kwargs)
    rng = np.random.default_rng(ctx.obj["seed"])
    report = lifecycle_mod.reduce(store, model, policy=policy, rng=rng)
    _save(store_path, store, model)
    _emit({"verb": "reduce", **{k: v for k, v in report.items()
                                if k != "mass_flows"},
           "mass_flows": report["mass_flows"][:100]},
          store, ctx.obj["seed"], ctx.obj["out"])


@cli.command()
@click.option("--store", "store_path", required=True)
@click.option("--json-out", required=True)
@click.pass_context
def export(ctx, store_path, json_out):
    """Export the store (and model) as JSON."""
    store, model = _load(store_path)
    doc = {"store": json.loads(store.to_json()),
           "model": model.to_dict() if model else None}
    with open(json_out, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    _emit({"verb": "export", "path": json_out},
          store, ctx.obj["seed"], ctx.obj["out"])


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.UsageError as e:
        click.echo("usage error: %s" % e.format_message(), err=True)
        return 1
    except click.exceptions.Exit as e:
        return 0 if e.exit_code == 0 else 1
    except (SchemaError, FileNotFoundError, json.JSONDecodeError,
            KeyError) as e:
        click.echo("data error: %s" % e, err=True)
        return 2
    except (ArithmeticError, RuntimeError, ValueError) as e:
        click.echo("numeric error: %s" % e, err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
