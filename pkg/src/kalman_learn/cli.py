"""Command-line entry point: ``kalman-learn <command> --config run.json --out DIR``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import COMMANDS, ConfigError, RunConfig, config_from_dict, load_config
from .datasets import ingest_csv, ingest_idx, train_test
from .dynsys import (
    EstimationConfig,
    LorenzConfig,
    PolyModel,
    TermDictionary,
    estimate_parameters,
    make_training_set,
    term_values,
)
from .ensemble import NoiseModel
from .infosel import SelectionConfig, greedy_select, pairwise_mi, rank_mi, structure_learn
from .network import mlp
from .trainer import LOG_FIELDS, SgdConfig, TrainConfig, train_ekl, train_sgd

__all__ = ["main", "run", "resolve_threads"]

THREADS_ENV = "KALMAN_LEARN_THREADS"


def _fmt(value):
    # repr of a Python float is the shortest string that round-trips
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


class CsvOut:
    """Header-first CSV writer that flushes every row."""

    def __init__(self, path, header):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\r\n")
        self.writer.writerow(header)
        self.fh.flush()

    def row(self, values):
        self.writer.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, header, rows):
    with CsvOut(path, header) as out:
        for r in rows:
            out.row(r)


def resolve_threads(flag, config_value):
    """``--threads`` wins, then the environment variable, then the config; 0 means all cores."""
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV, "").strip():
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {os.environ[THREADS_ENV]!r}") from None
    else:
        n = config_value
    if n < 0:
        raise ConfigError(f"threads: must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _log_writer(out_dir, record_time):
    out = CsvOut(out_dir / "log.csv", LOG_FIELDS)

    def on_record(rec):
        out.row([rec[k] if (k != "elapsed_ms" or record_time) else None for k in LOG_FIELDS])

    return out, on_record


def _dataset(cfg: RunConfig):
    d = cfg["data"]
    if d["csv"] is not None:
        return ingest_csv(d["csv"], d["target_column"], d["test_fraction"], cfg.seed, d["standardize"])
    train = ingest_idx(d["train_images"], d["train_labels"], d["train_limit"])
    test = ingest_idx(d["test_images"], d["test_labels"], d["test_limit"])
    return train_test(train, test)


def _network(cfg: RunConfig, dataset):
    n = cfg["network"]
    spec = mlp(n["widths"], n["hidden"], n["output"])
    if spec.input_dim != dataset.inputs.shape[1] or spec.output_dim != dataset.targets.shape[1]:
        raise ConfigError(
            f"network.widths: network maps {spec.input_dim} -> {spec.output_dim} but the data has "
            f"{dataset.inputs.shape[1]} features and {dataset.targets.shape[1]} targets"
        )
    return spec


def _train_config(cfg: RunConfig, threads):
    t = cfg["train"]
    noise = NoiseModel(t["r"], t["adapt_kappa"], t["r_min"], t["tolerance_mode"])
    return TrainConfig(
        minibatch_size=t["minibatch_size"],
        ensemble_size=t["ensemble_size"],
        epochs=t["epochs"],
        noise=noise,
        init_mean=t["init_mean"],
        init_std=t["init_std"],
        seed=cfg.seed,
        eval_every=t["eval_every"],
        perturb=t["perturb"],
        normalized=t["normalized"],
        threads=threads,
    )


def _sgd_config(cfg: RunConfig):
    s = cfg["sgd"]
    return SgdConfig(
        lr=s["lr"],
        minibatch_size=s["minibatch_size"],
        epochs=s["epochs"],
        init_mean=s["init_mean"],
        init_std=s["init_std"],
        seed=cfg.seed,
        eval_every=s["eval_every"],
    )


COMPARISON_HEADER = ("method", "epochs", "iterations", "metric", "final_test_metric", "tail_mean_test_metric")


def _comparison_row(method, log, epochs, tail_fraction):
    # per-epoch evaluations; the tail mean smooths minibatch noise
    ends = [r for r in log.evaluations() if r["iteration"] > 0]
    n_tail = max(1, int(round(tail_fraction * len(ends)))) if ends else 0
    tail = float(np.mean([r["test_metric"] for r in ends[-n_tail:]])) if ends else log.final_test_metric
    return (method, epochs, log.records[-1]["iteration"], log.metric, log.final_test_metric, tail)


def cmd_train(cfg: RunConfig, out_dir: Path, threads: int):
    data = _dataset(cfg)
    spec = _network(cfg, data)
    out, on_record = _log_writer(out_dir, cfg.record_time)
    with out:
        _, log = train_ekl(spec, data, _train_config(cfg, threads), on_record=on_record)
    rows = [_comparison_row("ekl", log, cfg["train"]["epochs"], 1.0 / max(1, cfg["train"]["epochs"]))]
    if cfg["train"]["compare_sgd"]:
        _, sgd_log = train_sgd(spec, data, _sgd_config(cfg))
        rows.append(_comparison_row("sgd", sgd_log, cfg["sgd"]["epochs"], cfg["sgd"]["tail_fraction"]))
    write_csv(out_dir / "comparison.csv", COMPARISON_HEADER, rows)


def cmd_baseline(cfg: RunConfig, out_dir: Path, threads: int):
    data = _dataset(cfg)
    spec = _network(cfg, data)
    out, on_record = _log_writer(out_dir, cfg.record_time)
    with out:
        _, log = train_sgd(spec, data, _sgd_config(cfg), on_record=on_record)
    write_csv(
        out_dir / "comparison.csv",
        COMPARISON_HEADER,
        [_comparison_row("sgd", log, cfg["sgd"]["epochs"], cfg["sgd"]["tail_fraction"])],
    )


def _lorenz_data(cfg: RunConfig):
    lz = cfg["lorenz"]
    lcfg = LorenzConfig(lz["sigma"], lz["rho"], lz["beta"], tuple(lz["x0"]), lz["dt"], lz["steps"], lz["integrator"])
    states, derivs = make_training_set(lcfg, lz["derivatives"])
    return lcfg, states, derivs


def _selection_config(cfg: RunConfig):
    s = cfg["selection"]
    return SelectionConfig(
        penalty_c=s["penalty_c"],
        max_cycles=s["max_cycles"],
        prune_threshold=s["prune_threshold"],
        cycle_variance_target=s["cycle_variance_target"],
        rebalance_std=s["rebalance_std"],
        window=s["window"],
        window_start=s["window_start"],
        error_tolerance=s["error_tolerance"],
    )


def _estimation_config(cfg: RunConfig, max_iters):
    e = cfg["estimation"]
    return EstimationConfig(
        target_variance=e["target_variance"],
        max_iters=max_iters,
        r=e["r"],
        seed=cfg.seed,
        stride=e["stride"],
        batch=e["batch"],
        normalized=e["normalized"],
    )


def _equations_json(model: PolyModel, extra):
    names = model.dictionary.names
    means, stds = model.mean_matrix(), model.std_matrix()
    eqs = []
    for i in range(model.n_equations):
        terms = [
            {"term": names[j], "mean": float(means[i, j]), "std": float(stds[i, j])}
            for j in np.flatnonzero(model.active[i])
        ]
        eqs.append({"lhs": f"dx{i + 1}/dt", "terms": terms})
    doc = {"dictionary": names, "equations": eqs, "n_active": int(model.active.sum())}
    doc.update(extra)
    return json.dumps(doc, indent=2) + "\n"


def _mi_rows(table, cycle, selection):
    ranked = rank_mi(table)
    rank = np.empty(len(ranked), int)
    flat_pos = ranked.term_index * table.values.shape[1] + ranked.error_index
    rank[flat_pos] = np.arange(1, len(ranked) + 1)
    chosen = set(selection.pairs)
    for t in range(table.values.shape[0]):
        for e in range(table.values.shape[1]):
            pos = t * table.values.shape[1] + e
            yield (cycle, table.term_ids[t], table.error_ids[e], table.values[t, e], rank[pos], (t, e) in chosen)


MI_HEADER = ("cycle", "term_id", "error_id", "psi", "rank", "selected")


def cmd_discover(cfg: RunConfig, out_dir: Path, threads: int):
    _, states, derivs = _lorenz_data(cfg)
    dictionary = TermDictionary(3, 2)
    est = cfg["estimation"]
    log_rows = []
    if cfg.discover_mode == "full":
        model = PolyModel.gaussian(
            dictionary,
            np.ones((3, len(dictionary)), bool),
            est["init_mean"],
            est["init_std"],
            est["ensemble_size"],
            cfg.seed,
        )
        result = estimate_parameters(model, states, derivs, _estimation_config(cfg, est["max_iters"]))
        for k, v in enumerate(result.variance, start=1):
            log_rows.append((k, 0, None, None, v, est["r"], None))
        write_csv(out_dir / "log.csv", LOG_FIELDS, log_rows)
        extra = {"mode": "full", "converged": result.converged, "iterations": result.iterations}
        (out_dir / "equations.json").write_text(_equations_json(result.model, extra), encoding="utf-8")
        return 0 if result.converged else 3

    sel_cfg = _selection_config(cfg)
    result = structure_learn(
        dictionary,
        states,
        derivs,
        sel_cfg,
        _estimation_config(cfg, cfg["selection"]["max_total_iters"]),
        E=est["ensemble_size"],
    )
    for rec in result.log:
        log_rows.append((rec["iteration"], rec["cycle"], None, None, rec["variance"], est["r"], None))
    write_csv(out_dir / "log.csv", LOG_FIELDS, log_rows)
    write_csv(out_dir / "survival.csv", ("cycle", "equation", "term", "status"),
              ((c, e, dictionary.names[t], s) for c, e, t, s in result.survival.rows()))
    mi_rows = []
    for c in result.cycles:
        mi_rows.extend(_mi_rows(c["table"], c["cycle"], greedy_select(rank_mi(c["table"]), sel_cfg)))
    write_csv(out_dir / "mi_table.csv", MI_HEADER, mi_rows)
    extra = {
        "mode": "structure",
        "converged": result.converged,
        "iterations": result.total_iterations,
        "cycles": len(result.cycles),
    }
    (out_dir / "equations.json").write_text(_equations_json(result.model, extra), encoding="utf-8")
    return 0 if result.converged else 3


def cmd_simulate(cfg: RunConfig, out_dir: Path, threads: int):
    lcfg, states, derivs = _lorenz_data(cfg)
    t = lcfg.dt * np.arange(len(states))
    write_csv(
        out_dir / "trajectory.csv",
        ("t", "x1", "x2", "x3", "dx1", "dx2", "dx3"),
        (np.concatenate([[ti], s, d]).tolist() for ti, s, d in zip(t, states, derivs)),
    )
    write_csv(out_dir / "log.csv", LOG_FIELDS, [])


def cmd_mi(cfg: RunConfig, out_dir: Path, threads: int):
    """MI of every term against each derivative (the empty model's errors)."""
    _, states, derivs = _lorenz_data(cfg)
    dictionary = TermDictionary(3, 2)
    s = cfg["selection"]
    w1 = None if s["window"] is None else s["window_start"] + s["window"]
    win = slice(s["window_start"], w1)
    if len(states[win]) < 3:
        raise ConfigError("selection.window: the window holds fewer than 3 samples")
    table = pairwise_mi(term_values(dictionary, states[win]), derivs[win], dictionary.names, ["e1", "e2", "e3"])
    write_csv(out_dir / "mi_table.csv", MI_HEADER, _mi_rows(table, 1, greedy_select(rank_mi(table), _selection_config(cfg))))
    write_csv(out_dir / "log.csv", LOG_FIELDS, [])


HANDLERS = {
    "train": cmd_train,
    "baseline": cmd_baseline,
    "discover": cmd_discover,
    "simulate": cmd_simulate,
    "mi": cmd_mi,
}


def run(cfg: RunConfig, out_dir, threads: int = 1) -> int:
    """Execute a validated config, writing artifacts into ``out_dir``; returns the exit status.

    Status 3 means the run finished but did not converge.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    status = HANDLERS[cfg.command](cfg, out_dir, threads)
    return status or 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kalman-learn", description="Ensemble Kalman learning and structure discovery")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    parser.add_argument("--out", default="run", help="artifact directory (default: ./run)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help=f"worker threads, 0 = all cores (fallback: ${THREADS_ENV})")
    args = parser.parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
            if cfg.command != args.command:
                raise ConfigError(f"command: config is for {cfg.command!r}, not {args.command!r}")
        else:
            cfg = config_from_dict({"command": args.command})
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"seed: must be in [0, 2**64), got {args.seed}")
            cfg.seed = args.seed
        threads = resolve_threads(args.threads, cfg.threads)
        cfg.threads = threads
        return run(cfg, args.out, threads)
    except ConfigError as exc:
        print(f"kalman-learn: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any failure
        print(f"kalman-learn: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
