"""Command-line entry point: ``relpsp {train,eval,gradcheck,diagnose,inspect}``.

Exit codes: 0 success, 1 usage error, 2 I/O or data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("relpsp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relpsp", description="Train and analyse ReL-PSP spiking networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def runtime(sp):
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads for the forward pass (default: all cores)")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible run")

    tr = sub.add_parser("train", help="train a network from a config file",
                        description="Train from an INI config; writes metrics.jsonl, best.ckpt, final.ckpt.")
    tr.add_argument("--config", required=True, help="INI config file")
    tr.add_argument("--seed", type=int, default=None, help="override [training] seed")
    tr.add_argument("--epochs", type=_positive_int, default=None, help="override [training] epochs")
    tr.add_argument("--data", default=None, help="override [data] path")
    tr.add_argument("--out", default=None, help="override [output] dir")
    runtime(tr)

    ev = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split",
                        description="Evaluate a checkpoint; prints one JSON record.")
    ev.add_argument("--checkpoint", required=True, help="checkpoint file")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to evaluate")
    ev.add_argument("--dataset", default=None, choices=["mnist", "fashion", "caltech"],
                    help="dataset kind (default: recorded in the checkpoint, else mnist)")
    ev.add_argument("--limit", type=_positive_int, default=None, help="evaluate only the first N samples")
    runtime(ev)

    gc = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences",
                        description="Finite-difference audit on random networks; prints max rel. errors.")
    gc.add_argument("--arch", required=True, help="architecture string, e.g. 784-40-10")
    gc.add_argument("--seed", type=int, default=0, help="random seed")
    gc.add_argument("--samples", type=_positive_int, default=50, help="number of random networks")
    gc.add_argument("--kernel", default="rel", choices=["rel", "alpha"], help="PSP kernel")
    gc.add_argument("--tol", type=float, default=1e-4, help="tolerance for per-weight/input checks")

    dg = sub.add_parser("diagnose", help="spike-time, gradient and dead-neuron statistics",
                        description="Writes spike_times.jsonl, gradients.jsonl and census.jsonl to --out.")
    dg.add_argument("--checkpoint", required=True, help="checkpoint file")
    dg.add_argument("--data", required=True, help="dataset directory")
    dg.add_argument("--out", required=True, help="output directory")
    dg.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to analyse")
    dg.add_argument("--dataset", default=None, choices=["mnist", "fashion", "caltech"],
                    help="dataset kind (default: recorded in the checkpoint, else mnist)")
    dg.add_argument("--limit", type=_positive_int, default=None, help="use only the first N samples")
    runtime(dg)

    ins = sub.add_parser("inspect", help="print a checkpoint header",
                         description="Print the JSON header of a checkpoint after verifying it.")
    ins.add_argument("--checkpoint", required=True, help="checkpoint file")
    return p


def _set_threads(args):
    import numba

    if getattr(args, "deterministic", False):
        numba.set_num_threads(1)
    elif getattr(args, "threads", None):
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))


def _load_split(kind: str, directory, split: str):
    from .data import load_caltech, load_mnist

    if kind == "caltech":
        train, val, test = load_caltech(directory)
        return {"train": train, "val": val, "test": test}[split]
    if split == "val":
        raise UsageError(f"{kind} has no validation split")
    return load_mnist(directory, split)


def _network_from_checkpoint(path):
    from .data import load_checkpoint
    from .encoding import EncoderConfig
    from .topology import Network

    ckpt = load_checkpoint(path)
    hyper = ckpt.hyper
    net = Network(ckpt.architecture, ckpt.weights, ckpt.thresholds, ckpt.kernel,
                  hyper.get("t_max", 4.0), hyper.get("tau", 1.0))
    enc = EncoderConfig(**ckpt.encoder) if ckpt.encoder else EncoderConfig()
    return ckpt, net, enc


def _dataset_for(args, ckpt):
    kind = args.dataset or ckpt.hyper.get("dataset", "mnist")
    ds = _load_split(kind, args.data, args.split)
    if args.limit:
        ds = ds.subset(args.limit) if args.limit < len(ds) else ds
    return ds


def cmd_train(args) -> int:
    from .config import load_config
    from .data import load_caltech, load_mnist
    from .training import MetricsSink, train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    if args.data is not None:
        cfg.data.path = args.data
    if args.out is not None:
        cfg.output.dir = args.out
    if args.deterministic:
        cfg.training.deterministic = True
    if args.threads:
        cfg.training.threads = args.threads
    if not cfg.data.path:
        raise UsageError("no dataset path: set [data] path or pass --data")
    if cfg.data.dataset == "caltech":
        train_set, _, test_set = load_caltech(cfg.data.path, seed=cfg.data.subset_seed)
    else:
        train_set = load_mnist(cfg.data.path, "train")
        test_set = load_mnist(cfg.data.path, "test")
    if cfg.data.train_subset:
        train_set = train_set.subset(cfg.data.train_subset, cfg.data.subset_seed)
    if cfg.data.test_subset:
        test_set = test_set.subset(cfg.data.test_subset, cfg.data.subset_seed)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(cfg, train_set, test_set, MetricsSink(out / "metrics.jsonl"), out)
    print(json.dumps({"best_test_accuracy": result.best_accuracy, "best_epoch": result.best_epoch,
                      "final_train_accuracy": result.history[-1]["train_accuracy"],
                      "out_dir": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import encode_dataset, evaluate

    _set_threads(args)
    ckpt, net, enc = _network_from_checkpoint(args.checkpoint)
    ds = _dataset_for(args, ckpt)
    res = evaluate(net, encode_dataset(ds, enc, net.dtype), ds.labels)
    rec = {"schema": "relpsp.metrics/1", "kind": "eval", "split": args.split, "n": res.n,
           "accuracy": res.accuracy, "mean_loss": res.mean_loss,
           "hidden_spiked_before_decision": res.decision_fraction,
           "hidden_spiked_total": res.spiked_fraction}
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    rep = gradcheck(args.arch, args.seed, args.samples, args.kernel)
    print(f"networks: {rep.n_nets}  weight probes: {rep.n_weight_probes}  input probes: {rep.n_input_probes}  "
          f"directional: {rep.n_directional}  skipped (causal set changed): {rep.n_skipped}")
    print(f"max rel. err weights: {rep.max_weight_err:.3e}")
    print(f"max rel. err input times: {rep.max_input_err:.3e}")
    print(f"max rel. err directional: {rep.max_directional_err:.3e}")
    ok = rep.passed(args.tol, max(args.tol, 1e-3))
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_diagnose(args) -> int:
    from .training import SCHEMA, encode_dataset, evaluate

    _set_threads(args)
    ckpt, net, enc = _network_from_checkpoint(args.checkpoint)
    ds = _dataset_for(args, ckpt)
    res = evaluate(net, encode_dataset(ds, enc, net.dtype), ds.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = {"schema": SCHEMA, "checkpoint": str(args.checkpoint), "kernel": net.kernel,
              "split": args.split, "n": res.n}
    records = {
        "spike_times.jsonl": [{**common, "kind": "spike_times", "layer": name, "hist": h}
                              for name, h in res.spike_time_hist.items()],
        "gradients.jsonl": [{**common, "kind": "dtdv", "hist": res.dtdv_hist}],
        "census.jsonl": [{**common, "kind": "census", "dead_fraction": res.dead_fraction,
                          "hidden_spiked_before_decision": res.decision_fraction,
                          "hidden_spiked_total": res.spiked_fraction, "accuracy": res.accuracy}],
    }
    for name, recs in records.items():
        with open(out / name, "w") as f:
            for r in recs:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    print(json.dumps({"accuracy": res.accuracy, "hidden_spiked_before_decision": res.decision_fraction,
                      "hidden_spiked_total": res.spiked_fraction, "dead_fraction": res.dead_fraction,
                      "max_dtdv": res.dtdv_hist["max"], "out_dir": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .data import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    header = ckpt.header()
    header["n_params"] = int(sum(np.prod(w.shape) for w in ckpt.weights))
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "diagnose": cmd_diagnose, "inspect": cmd_inspect}


def run(argv=None) -> int:
    from .data import CheckpointError, IdxError
    from .topology import ArchitectureError
    from .training import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ArchitectureError) as exc:
        print(f"relpsp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxError, CheckpointError) as exc:
        print(f"relpsp {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"relpsp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # config and data validation problems
        print(f"relpsp {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO if args.command in ("eval", "diagnose") else EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
