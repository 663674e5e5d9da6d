"""Command-line surface: dataset generation, simulation, sweeps, self-checks,
and the live server/agent runtime.

Exit codes: 0 success, 1 usage error, 2 runtime error. Config files are flat
key=value text (see simulator.parse_config_file); explicit flags win over
file values. Every command logs its fully resolved configuration, seeds
included, so an output can be reproduced from the log alone.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import data as data_mod
from . import simulator, wire
from .errors import WireError
from .federation import ModelBlob, blob_from_head
from .nn import gradient_check, init_head
from .runtime import Agent, RoundPolicy, configure_logging, parse_endpoint, serve

log = logging.getLogger("fedhead.cli")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; this artifact reserves 2 for runtime
    # failures, so route usage problems through an exception instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _log_config(command: str, resolved: dict) -> None:
    log.info("resolved config: %s", json.dumps({"command": command, **resolved}, default=str))


# -- dataset helpers -----------------------------------------------------------


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=["separable", "sparse"], default=None,
                   help="synthetic task family (default separable)")
    p.add_argument("--dim", type=int, default=None, help="embedding dimension (default 16)")
    p.add_argument("--classes", type=int, default=None, help="number of classes (default 2)")
    p.add_argument("--samples", type=int, default=None, help="total samples (default 20000)")
    p.add_argument("--margin", type=float, default=None, help="centroid separation (default 4.0)")
    p.add_argument("--sparse-dims", type=int, default=None,
                   help="signal-carrying dims for --kind sparse (default 16)")
    p.add_argument("--val-fraction", type=float, default=None,
                   help="validation share (default 0.2)")


_SYNTH_FIELDS = {
    "kind": "kind",
    "dim": "embedding_dim",
    "classes": "num_classes",
    "samples": "samples",
    "margin": "margin",
    "sparse_dims": "sparse_dims",
    "val_fraction": "val_fraction",
}


def _synth_overrides(args) -> dict:
    out = {}
    for flag, field in _SYNTH_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            out[field] = value
    return out


# -- subcommand implementations ---------------------------------------------


def _cmd_gen_data(args) -> int:
    spec = simulator.SyntheticSpec(**{**dict(kind="separable"), **_synth_overrides(args)})
    _log_config("gen-data", {**dataclasses.asdict(spec), "seed": args.seed, "out": args.out})
    dataset = spec.build(args.seed)
    data_mod.save_dataset(dataset, args.out)
    print(
        f"wrote {args.out}: {len(dataset.labels)} samples, "
        f"E={dataset.embedding_dim}, C={dataset.num_classes}, "
        f"{len(dataset.validation_indices())} validation"
    )
    return 0


def _experiment_from_flags(args, base: simulator.ExperimentConfig) -> simulator.ExperimentConfig:
    """Overlay explicit flags on a base config; flags win."""
    replacements = {}
    for flag, field in (
        ("devices", "devices"),
        ("batch_size", "batch_size"),
        ("episodes", "local_episodes"),
        ("lr", "learning_rate"),
        ("epochs", "epochs"),
        ("reps", "repetitions"),
        ("seed", "base_seed"),
        ("init", "init_mode"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            replacements[field] = value
    if getattr(args, "data", None) is not None:
        replacements["dataset"] = args.data
    else:
        synth = _synth_overrides(args)
        if synth or not isinstance(base.dataset, (str,)):
            current = base.dataset if isinstance(base.dataset, simulator.SyntheticSpec) else simulator.SyntheticSpec()
            replacements["dataset"] = dataclasses.replace(current, **synth)
    return dataclasses.replace(base, **replacements)


def _print_sweep_summary(result: simulator.SweepResult) -> None:
    for point in result.points:
        final = point.epochs[-1]
        print(
            f"{result.sweep_param}={point.sweep_value}: "
            f"final val_acc {final.val_acc_mean:.4f} ± {final.val_acc_std:.4f} "
            f"({final.examples_seen} examples seen)"
        )


def _cmd_simulate(args) -> int:
    base = simulator.parse_config_file(args.config) if args.config else simulator.ExperimentConfig()
    cfg = _experiment_from_flags(args, base)
    cfg = dataclasses.replace(cfg, sweep_param="devices", sweep_values=[cfg.devices])
    _log_config("simulate", dataclasses.asdict(cfg))
    result = simulator.run_sweep(cfg)
    _print_sweep_summary(result)
    if args.out:
        simulator.emit_csv(result, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    if args.preset and args.config:
        raise _UsageError("--preset and --config are mutually exclusive")
    if args.preset:
        base = simulator.default_presets()[args.preset]
    elif args.config:
        base = simulator.parse_config_file(args.config)
    else:
        base = simulator.ExperimentConfig()
    cfg = _experiment_from_flags(args, base)
    if args.sweep is not None:
        cfg = dataclasses.replace(cfg, sweep_param=args.sweep)
    if args.values is not None:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = raw if cfg.sweep_param == "init_mode" else [int(v) for v in raw]
        cfg = dataclasses.replace(cfg, sweep_values=values)
    _log_config("sweep", dataclasses.asdict(cfg))
    result = simulator.run_sweep(cfg)
    _print_sweep_summary(result)
    out = args.out or (f"{args.preset}.csv" if args.preset else "sweep.csv")
    simulator.emit_csv(result, out)
    print(f"wrote {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    _log_config("gradcheck", {
        "trials": args.trials, "seed": args.seed, "step": args.step,
        "max_dim": args.max_dim, "max_classes": args.max_classes, "tol": args.tol,
    })
    worst = gradient_check(
        trials=args.trials, seed=args.seed, step=args.step,
        max_dim=args.max_dim, max_classes=args.max_classes,
    )
    print(f"max relative error over {args.trials} trials: {worst:.3e}")
    if worst > args.tol:
        print(f"gradcheck FAILED: {worst:.3e} > tolerance {args.tol:.0e}", file=sys.stderr)
        return 2
    return 0


def _cmd_serve(args) -> int:
    endpoint = parse_endpoint(args.listen)
    policy = RoundPolicy.parse(args.policy)
    validation = None
    if args.data:
        validation = data_mod.load_dataset(args.data).validation_samples()
    blob = blob_from_head(init_head(args.dim, args.classes, args.init, seed=args.seed))
    _log_config("serve", {
        "listen": args.listen, "policy": args.policy, "dim": args.dim,
        "classes": args.classes, "init": args.init, "seed": args.seed,
        "rounds": args.rounds, "timeout": args.timeout, "data": args.data,
    })
    server = serve(
        endpoint, blob, policy,
        validation=validation, round_timeout=args.timeout, max_rounds=args.rounds,
    )
    print(f"served {len(server.history)} rounds on {server.address[0]}:{server.address[1]}")
    return 0


def _cmd_agent(args) -> int:
    endpoint = parse_endpoint(args.connect)
    dataset = data_mod.load_dataset(args.data)
    if not 0 <= args.device_id < args.num_devices:
        raise _UsageError(
            f"--device-id must be in [0, {args.num_devices}) to pick a shard"
        )
    stream = data_mod.partition(dataset, args.num_devices, args.partition_seed)[args.device_id]
    _log_config("agent", {
        "connect": args.connect, "device_id": args.device_id, "data": args.data,
        "num_devices": args.num_devices, "partition_seed": args.partition_seed,
        "lr": args.lr, "episodes": args.episodes,
        "sync_batch": args.sync_batch, "push_every": args.push_every,
    })
    worker = Agent(
        endpoint[0], endpoint[1], args.device_id, stream,
        learning_rate=args.lr, local_episodes=args.episodes,
        sync_batch=args.sync_batch, push_every=args.push_every,
    )
    try:
        worker.run()
    except KeyboardInterrupt:
        pass
    print(f"device {args.device_id}: trained on {worker.samples_trained} samples, "
          f"{worker.installs} models installed")
    return 0


def _cmd_encode(args) -> int:
    with open(args.infile, "r") as fh:
        payload = json.load(fh)
    try:
        blob = ModelBlob(
            np.asarray(payload["values"], dtype=np.float64),
            int(payload["embedding_dim"]),
            int(payload["num_classes"]),
        )
    except KeyError as exc:
        raise ValueError(f"blob JSON is missing key {exc}") from None
    encoded = wire.encode_model(blob)
    with open(args.out, "wb") as fh:
        fh.write(encoded)
    _log_config("encode", {"in": args.infile, "out": args.out, "bytes": len(encoded)})
    print(f"wrote {args.out}: {len(encoded)} bytes "
          f"(E={blob.embedding_dim}, C={blob.num_classes})")
    return 0


def _cmd_decode(args) -> int:
    with open(args.infile, "rb") as fh:
        encoded = fh.read()
    blob = wire.decode_model(encoded)
    payload = {
        "embedding_dim": blob.embedding_dim,
        "num_classes": blob.num_classes,
        "values": blob.values.tolist(),
    }
    text = json.dumps(payload)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    _log_config("decode", {"in": args.infile, "out": args.out})
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedhead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic embedding dataset file")
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=_cmd_gen_data)

    def add_run_flags(p, with_out_default=False):
        p.add_argument("--config", default=None, help="key=value config file; flags override it")
        p.add_argument("--devices", "-N", type=int, default=None)
        p.add_argument("--batch-size", "-B", type=int, default=None, dest="batch_size")
        p.add_argument("--episodes", "-L", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--epochs", "-T", type=int, default=None)
        p.add_argument("--reps", "-R", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--init", choices=["random", "zeros", "pretrained"], default=None)
        p.add_argument("--data", default=None, help="dataset file (default: synthetic)")
        _add_synth_flags(p)

    p = sub.add_parser("simulate", help="run one federated configuration")
    add_run_flags(p)
    p.add_argument("--out", default=None, help="optional per-epoch CSV path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="run a parameter sweep and write its CSV")
    p.add_argument("--preset", choices=["fig1", "fig2", "fig3", "fig4"], default=None)
    add_run_flags(p)
    p.add_argument("--sweep", choices=list(simulator.SWEEP_AXES), default=None,
                   help="axis to sweep")
    p.add_argument("--values", default=None, help="comma-separated sweep values")
    p.add_argument("--out", default=None, help="CSV path (default <preset>.csv)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--max-dim", type=int, default=8)
    p.add_argument("--max-classes", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("serve", help="run the global-model server")
    p.add_argument("--listen", default="127.0.0.1:7700", help="host:port to bind")
    p.add_argument("--policy", default="timer:5", help="count:K or timer:SECONDS")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--init", choices=["random", "zeros"], default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=None, help="stop after this many rounds")
    p.add_argument("--timeout", type=float, default=5.0, help="round collection deadline")
    p.add_argument("--data", default=None, help="dataset file for server-side validation")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("agent", help="run a device agent")
    p.add_argument("--connect", default="127.0.0.1:7700", help="server host:port")
    p.add_argument("--device-id", type=int, required=True)
    p.add_argument("--data", required=True, help="dataset file to stream from")
    p.add_argument("--num-devices", type=int, default=1,
                   help="partition count; this agent takes shard --device-id")
    p.add_argument("--partition-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--sync-batch", type=int, default=None,
                   help="lockstep mode: train this many samples per install, then push")
    p.add_argument("--push-every", type=int, default=None,
                   help="free-run mode: push an update every this many samples")
    p.set_defaults(func=_cmd_agent)

    p = sub.add_parser("encode", help="blob JSON -> encoded model bytes")
    p.add_argument("--in", dest="infile", required=True, help="blob JSON file")
    p.add_argument("--out", required=True, help="output binary path")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="encoded model bytes -> blob JSON")
    p.add_argument("--in", dest="infile", required=True, help="encoded model file")
    p.add_argument("--out", default=None, help="JSON path (default: stdout)")
    p.set_defaults(func=_cmd_decode)

    return parser


def main(argv=None) -> int:
    try:
        configure_logging()
    except ValueError as exc:
        print(f"fedhead: {exc}", file=sys.stderr)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"fedhead: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"fedhead: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
