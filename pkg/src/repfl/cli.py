"""Command-line experiment runner.

    repfl run CONFIG                      full pipeline for every configured seed
    repfl compare CONFIG --methods a,b    several methods on identical partitions
    repfl adapt CHECKPOINT DATA           head-only adaptation for new clients
    repfl export-embeddings CHECKPOINT DATA OUT

Worker threads for client updates come from the REPFL_WORKERS environment
variable (default 1); results do not depend on it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .config import ExperimentConfig, federation_from_dict, help_text, load_config
from .data import (LabeledDataset, all_client_views, client_view, dirichlet_partition,
                   load_dataset, synth_gaussian_mixture)
from .errors import (CheckpointError, ConfigError, DataError, NumericError, PartitionError,
                     ShapeError)
from .federation import (METHODS, adapt_new_client, personalize_all, run_baseline, run_crl)
from .nn import HEAD_KINDS
from .numerics import RngStream

log = logging.getLogger("repfl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def workers_from_env() -> int:
    raw = os.environ.get("REPFL_WORKERS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ConfigError(f"REPFL_WORKERS must be an integer, got {raw!r}") from None


def load_experiment_data(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    src = cfg.data
    if src.source == "synth":
        data_seed = seed if src.synth_seed < 0 else src.synth_seed
        return synth_gaussian_mixture(src.synth_classes, src.synth_per_class, src.synth_dim,
                                      src.synth_spread, src.synth_separation,
                                      RngStream(data_seed, "synth"), src.test_fraction)
    ds = load_dataset(src.path)
    if src.test_path:
        test = load_dataset(src.test_path)
        if test.dim != ds.dim:
            raise DataError(f"test file has {test.dim} features, train file {ds.dim}")
        c = max(ds.num_classes, test.num_classes)
        return LabeledDataset(np.vstack([ds.features, test.features]),
                              np.concatenate([ds.labels, test.labels]), c,
                              np.r_[np.zeros(len(ds), bool), np.ones(len(test), bool)])
    return ds.with_split(src.test_fraction, RngStream(seed, "test-split"))


def run_method(cfg: ExperimentConfig, seed: int, method: str, workers: int, out_dir: Path = None):
    """One seed of one method; returns ``(EvalReport, trace_rows)``."""
    fed = cfg.for_seed(seed, method)
    ds = load_experiment_data(cfg, seed)
    part = dirichlet_partition(ds, fed.num_clients, fed.alpha, RngStream(seed),
                               min_size=fed.min_size)
    clients = all_client_views(ds, part, cfg.data.test_mode)
    snapshot = cfg.snapshot(seed, method)
    if method == "repper":
        crl = run_crl(clients, fed, workers)
        models = {m.client_id: m for m in personalize_all(crl.encoder, clients, fed,
                                                          workers=workers)}
        traces = crl.traces
        if out_dir is not None and cfg.save_checkpoints:
            report.save_checkpoint(out_dir / f"crl_seed{seed}.ckpt",
                                   report.encoder_checkpoint(crl.encoder, snapshot, "crl"))
            report.save_checkpoint(out_dir / f"pcl_seed{seed}.ckpt",
                                   _heads_checkpoint(models, snapshot))
    else:
        result = run_baseline(clients, fed, workers)
        models = result.predictors(fed.num_clients)
        traces = result.traces
        if out_dir is not None and cfg.save_checkpoints:
            report.save_checkpoint(
                out_dir / f"{method}_seed{seed}.ckpt",
                report.encoder_checkpoint(result.model.encoder, snapshot, "baseline",
                                          head=result.model.head))
    rep = report.evaluate(models, clients, method, report.config_hash(snapshot), seed,
                          part.digest(), [t.mean_train_loss for t in traces])
    rows = [(method, seed, t.round, t.mean_train_loss) for t in traces]
    return rep, rows


def _heads_checkpoint(models, snapshot):
    tensors, meta = {}, {}
    for cid in sorted(models):
        head = models[cid].head
        tensors.update(report.stack_tensors(f"client{cid}", head))
        meta[f"client{cid}.activations"] = ",".join(head.activations)
        meta[f"client{cid}.kind"] = head.kind
    return report.Checkpoint("pcl", snapshot, tensors, meta)


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides[("output", "seeds")] = (args.seed,)
    cfg = load_config(args.config, overrides)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers_from_env()
    method = cfg.federation.method
    all_rows = []
    for seed in cfg.seeds:
        rep, rows = run_method(cfg, seed, method, workers, out)
        rep.write(out / f"report_{method}_seed{seed}.json")
        all_rows.extend(rows)
        print(f"{method} seed {seed}: federation top-1 {_fmt(rep.federation_top1_mean)}")
    report.write_metrics_csv(out / "metrics.csv", all_rows)
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def summarize(values):
    """Mean and sample standard deviation (ddof=1; None for a single value)."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return None, None
    std = float(np.std(vals, ddof=1)) if vals.size > 1 else None
    return float(vals.mean()), std


def cmd_compare(args) -> int:
    overrides = {}
    if args.seeds:
        overrides[("output", "seeds")] = tuple(int(s) for s in args.seeds.split(","))
    cfg = load_config(args.config, overrides)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers_from_env()
    table, all_rows = [], []
    partitions = {}
    for method in methods:
        per_seed = {}
        for seed in cfg.seeds:
            rep, rows = run_method(cfg, seed, method, workers, out)
            rep.write(out / f"report_{method}_seed{seed}.json")
            all_rows.extend(rows)
            per_seed[seed] = rep.federation_top1_mean
            partitions.setdefault(seed, set()).add(rep.partition_hash)
        mean, std = summarize(per_seed.values())
        table.append({"method": method, "mean": mean, "std": std,
                      "per_seed": {str(s): v for s, v in per_seed.items()}})
    if any(len(h) != 1 for h in partitions.values()):
        raise PartitionError("methods saw different partitions for the same seed")
    doc = {"seeds": list(cfg.seeds),
           "partition_hashes": {str(s): next(iter(h)) for s, h in partitions.items()},
           "config_hash": report.config_hash(cfg.snapshot()),
           "methods": table}
    (out / "compare.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with (out / "compare.csv").open("w") as fh:
        fh.write("method,mean_top1,std_top1,n_seeds\n")
        for row in table:
            fh.write(f"{row['method']},{_csv_num(row['mean'])},{_csv_num(row['std'])},"
                     f"{len(cfg.seeds)}\n")
    report.write_metrics_csv(out / "metrics.csv", all_rows)
    for row in table:
        std = "" if row["std"] is None else f" +- {row['std']:.4f}"
        print(f"{row['method']:<12} {_fmt(row['mean'])}{std}")
    return EXIT_OK


def _csv_num(v):
    return "" if v is None else repr(float(v))


def _load_encoder(path):
    ckpt = report.load_checkpoint(path)
    if ckpt.stage not in ("crl", "baseline"):
        raise CheckpointError(f"checkpoint stage {ckpt.stage!r} holds no encoder")
    return ckpt, report.encoder_from_checkpoint(ckpt)


def cmd_adapt(args) -> int:
    ckpt, encoder = _load_encoder(args.checkpoint)
    fed = federation_from_dict(ckpt.config["federation"])
    ds = load_dataset(args.data)
    if ds.dim != encoder.in_dim:
        raise DataError(f"data has {ds.dim} features, checkpoint encoder expects {encoder.in_dim}")
    if args.test_data:
        test = load_dataset(args.test_data)
        c = max(ds.num_classes, test.num_classes)
        ds = LabeledDataset(np.vstack([ds.features, test.features]),
                            np.concatenate([ds.labels, test.labels]), c,
                            np.r_[np.zeros(len(ds), bool), np.ones(len(test), bool)])
    else:
        ds = ds.with_split(args.test_fraction, RngStream(args.seed, "test-split"))
    part = dirichlet_partition(ds, args.num_clients, args.alpha, RngStream(args.seed),
                               min_size=1)
    clients = [client_view(ds, part, i, args.test_mode) for i in range(args.num_clients)]
    fed = replace(fed, seed=args.seed)
    models = {}
    for c in clients:
        models[c.client_id] = adapt_new_client(encoder, c, args.head, args.iterations, fed)
    rep = report.evaluate(models, clients, f"adapt-{args.head}", ckpt.config_hash, args.seed,
                          part.digest())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "adapt_report.json")
    with (out / "adapt.csv").open("w") as fh:
        fh.write("client,n_train,n_test,top1\n")
        for c, ev in zip(clients, rep.clients):
            fh.write(f"{ev.id},{c.n_train},{ev.n_test},{_csv_num(ev.top1)}\n")
            print(f"client {ev.id}: n_test {ev.n_test} top-1 {_fmt(ev.top1)}")
    return EXIT_OK


def cmd_export(args) -> int:
    _, encoder = _load_encoder(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.dim != encoder.in_dim:
        raise DataError(f"data has {ds.dim} features, checkpoint encoder expects {encoder.in_dim}")
    n = report.export_embeddings(encoder, ds, args.output)
    print(f"wrote {n} embeddings to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repfl", description="Two-stage personalized federated learning experiments.",
        epilog=help_text() + "\n\nenvironment: REPFL_WORKERS  worker threads (default 1)",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured method for every seed",
                       epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare methods on identical partitions and seeds",
                       epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--methods", default=",".join(METHODS),
                   help=f"comma-separated subset of {', '.join(METHODS)}")
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated seeds (overrides [output] seeds)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("adapt", help="train heads for new clients on a frozen encoder")
    p.add_argument("checkpoint", help="crl checkpoint written by 'run'")
    p.add_argument("data", help="new-client data (csv or FDS1 binary)")
    p.add_argument("--test-data", help="separate test file; otherwise a stratified split")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--test-mode", default="matched", choices=("matched", "present", "full"))
    p.add_argument("--head", default="logistic", choices=HEAD_KINDS)
    p.add_argument("--iterations", type=int, default=100,
                   help="passes over each client's mini-batches (default 100)")
    p.add_argument("--num-clients", type=int, default=1,
                   help="split the new data over this many clients")
    p.add_argument("--alpha", type=float, default=100.0,
                   help="Dirichlet concentration for splitting the new data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="adapt_out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("export-embeddings", help="write unit-normalized embeddings to CSV")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("output")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, PartitionError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
