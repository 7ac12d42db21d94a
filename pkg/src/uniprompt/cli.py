"""Command-line entry point binding all modules into reproducible commands."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .encoder import load_encoder, save_encoder
from .graphs import edge_homophily, load_graph_bundle, save_graph_bundle
from .harness import (
    DEFAULT_RUNS,
    DEFAULT_SEEDS,
    ExperimentSpec,
    evaluate,
    generate_sbm,
    noise_robustness,
    run_experiment,
    sample_k_shot,
    sweep,
)
from .hyperparams import get_tuning_config
from .prompt import METHODS, TuneConfig, run_method
from .pretrain import OBJECTIVES, PretrainConfig, pretrain
from .theory import format_report, run_verification

TUNE_FLAG_FIELDS = ("up_lr", "down_lr", "k", "tau", "alpha", "max_epochs",
                    "patience", "min_delta", "clf_hidden", "knn_sample")


def _data_dir(args):
    return Path(args.data_dir or os.environ.get("UNIPROMPT_DATA_DIR", "."))


def _resolve_dataset(args):
    candidate = Path(args.dataset)
    if candidate.is_dir():
        return load_graph_bundle(candidate)
    return load_graph_bundle(_data_dir(args) / args.dataset)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _tune_config(args, pretrain_name, dataset_name):
    """Shipped table < config file < explicit flags."""
    overrides = {}
    if args.config:
        cfg_file = _load_json(args.config)
        overrides.update({k: v for k, v in cfg_file.items() if k in TuneConfig.__dataclass_fields__})
    for name in TUNE_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    cfg = get_tuning_config(pretrain_name or "", dataset_name or "", args.shot, **overrides)
    return replace(cfg, seed=args.seed).validate()


def _cmd_pretrain(args):
    graph = _resolve_dataset(args)
    cfg = PretrainConfig(
        objective=args.objective,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        hidden_dim=args.hidden,
        embed_dim=args.embed,
    )
    enc = pretrain(graph, cfg)
    save_encoder(enc, args.out, meta={
        "pretrain": args.objective,
        "dataset": graph.name,
        "seed": args.seed,
    })
    print(f"wrote encoder checkpoint to {args.out}")
    return 0


def _cmd_tune(args):
    graph = _resolve_dataset(args)
    enc, meta = load_encoder(args.encoder)
    cfg = _tune_config(args, meta.get("pretrain"), graph.name)
    task = sample_k_shot(graph, args.shot, args.seed, args.run)
    result = run_method(args.method, graph, enc, task.train_ids, cfg)
    record = {
        "method": args.method,
        "dataset": graph.name,
        "seed": args.seed,
        "run": args.run,
        "shot": args.shot,
        "accuracy": evaluate(result.predictions, task),
        "epochs": result.epochs_run,
        "final_loss": result.final_loss,
    }
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _experiment_spec(args, config):
    graph_path = Path(config["dataset"])
    if not graph_path.is_dir():
        graph_path = _data_dir(args) / config["dataset"]
    graph = load_graph_bundle(graph_path)
    enc, meta = load_encoder(config["encoder"])
    pretrain_name = meta.get("pretrain", "unknown")
    methods = tuple(config["methods"])
    shots = tuple(config.get("shots", (1,)))
    tune = {}
    for method in methods:
        overrides = dict(config.get("tune", {}).get(method, config.get("tune", {}).get("default", {})))
        tune[method] = get_tuning_config(pretrain_name, graph.name, shots[0], **overrides)
    return ExperimentSpec(
        dataset=graph.name,
        pretrain=pretrain_name,
        graph=graph,
        encoder=enc,
        methods=methods,
        shots=shots,
        tune=tune,
        seeds=tuple(config.get("seeds", DEFAULT_SEEDS)),
        runs=int(config.get("runs", DEFAULT_RUNS)),
        workers=args.jobs,
    )


def _write_table(table, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "results.csv")
    table.to_markdown(out_dir / "results.md")
    print(f"wrote {out_dir / 'results.csv'} and {out_dir / 'results.md'}")


def _cmd_eval(args):
    spec = _experiment_spec(args, _load_json(args.config))
    _write_table(run_experiment(spec), args.out)
    return 0


def _cmd_sweep(args):
    spec = _experiment_spec(args, _load_json(args.config))
    grid = [float(v) for v in args.grid.split(",") if v]
    _write_table(sweep(args.param, grid, spec), args.out)
    return 0


def _cmd_noise(args):
    spec = _experiment_spec(args, _load_json(args.config))
    levels = [float(v) for v in args.levels.split(",") if v]
    _write_table(noise_robustness(levels, spec), args.out)
    return 0


def _cmd_verify_theory(args):
    summary = run_verification(trials=args.trials, eta=args.eta, seed=args.seed)
    report = format_report(summary)
    if args.out:
        Path(args.out).write_text(report + "\n")
    print(report)
    return 0 if summary.passed else 2


def _cmd_make_sbm(args):
    graph = generate_sbm(
        n=args.n,
        classes=args.classes,
        p_in=args.p_in,
        p_out=args.p_out,
        feature_dim=args.feature_dim,
        feature_sep=args.sep,
        seed=args.seed,
        name=args.name,
    )
    save_graph_bundle(graph, args.out)
    print(f"wrote SBM bundle to {args.out} "
          f"(N={graph.num_nodes}, E={graph.num_undirected_edges}, "
          f"homophily={edge_homophily(graph):.2f})")
    return 0


def _cmd_inspect(args):
    graph = _resolve_dataset(args)
    hom = edge_homophily(graph)
    hom_text = "n/a" if np.isnan(hom) else f"{hom:.2f}"
    line = (f"{graph.num_nodes} {graph.num_undirected_edges} "
            f"{graph.num_features} {graph.num_classes} {hom_text}")
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="uniprompt")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--data-dir", default=None)

    p = sub.add_parser("pretrain", help="train a self-supervised encoder")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--objective", required=True, choices=OBJECTIVES)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--embed", type=int, default=256)
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("tune", help="run one downstream tuning run")
    common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--encoder", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--shot", type=int, required=True)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--up-lr", dest="up_lr", type=float, default=None)
    p.add_argument("--down-lr", dest="down_lr", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--min-delta", dest="min_delta", type=float, default=None)
    p.add_argument("--clf-hidden", dest="clf_hidden", type=int, default=None)
    p.add_argument("--knn-sample", dest="knn_sample", type=int, default=None)
    p.set_defaults(handler=_cmd_tune)

    p = sub.add_parser("ablate", help="run one component-replacement run")
    common(p)
    p.add_argument("--variant", required=True,
                   choices=("random_topo", "simple_add", "discard_topo"))
    p.add_argument("--encoder", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--shot", type=int, required=True)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=lambda a: _cmd_tune(_as_ablate(a)))

    p = sub.add_parser("eval", help="full repeated-run experiment")
    common(p)
    p.add_argument("--config", required=True)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter sweep")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=("tau", "k", "alpha"))
    p.add_argument("--grid", required=True)
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("noise", help="feature-noise robustness experiment")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--levels", required=True)
    p.set_defaults(handler=_cmd_noise)

    p = sub.add_parser("verify-theory", help="prompt/classifier equivalence checks")
    common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--eta", type=float, default=1e-4)
    p.set_defaults(handler=_cmd_verify_theory)

    p = sub.add_parser("make-sbm", help="write a synthetic SBM bundle")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--p-in", dest="p_in", type=float, required=True)
    p.add_argument("--p-out", dest="p_out", type=float, required=True)
    p.add_argument("--sep", type=float, default=3.0)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=16)
    p.add_argument("--name", default="sbm")
    p.set_defaults(handler=_cmd_make_sbm)

    p = sub.add_parser("inspect", help="print dataset statistics")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(handler=_cmd_inspect)

    return parser


class _QuietParser(argparse.ArgumentParser):
    pass


def _as_ablate(args):
    args.method = f"ablate:{args.variant}"
    for name in TUNE_FLAG_FIELDS:
        if not hasattr(args, name):
            setattr(args, name, None)
    return args


def dispatch(argv):
    """0 on success, 1 on validation error, 2 on runtime abort."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.handler(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
