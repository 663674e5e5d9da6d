"""Experiment harness: seeded repeated runs, parameter sweeps, CSV output.

A sweep varies exactly one axis (devices, batch_size, local_episodes, or
init_mode), repeats each point R times with seeds base_seed..base_seed+R-1,
and reports mean and standard deviation of the accuracy curves. Everything
downstream of the config is deterministic, so re-running a sweep reproduces
its CSV byte for byte.

Seed derivation (stable, relied on for reproducibility): repetition r uses
rep_seed = base_seed + r, and its data generation, partitioning, and head
init consume the three children of np.random.SeedSequence([rep_seed]) in
that order. Repetitions are therefore independent of sweep-value order and
of which other values appear in the sweep.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import DataExhaustedError
from .federation import ModelBlob, RoundConfig, RunResult, run_training

SWEEP_AXES = ("devices", "batch_size", "local_episodes", "init_mode")

CSV_COLUMNS = (
    "sweep_param,sweep_value,epoch,examples_seen,"
    "val_acc_mean,val_acc_std,train_acc_mean,train_acc_std"
)


@dataclass
class SyntheticSpec:
    """Recipe for an on-the-fly dataset, regenerated per repetition seed."""

    kind: str = "separable"  # or "sparse"
    embedding_dim: int = 16
    num_classes: int = 2
    samples: int = 20000
    margin: float = 4.0
    sparse_dims: int = 16  # used by kind="sparse"
    val_fraction: float = 0.2

    def build(self, seed) -> data_mod.EmbeddingDataset:
        if self.kind == "separable":
            return data_mod.synth_separable(
                self.embedding_dim,
                self.num_classes,
                self.samples,
                self.margin,
                seed,
                val_fraction=self.val_fraction,
            )
        if self.kind == "sparse":
            return data_mod.synth_sparse(
                self.embedding_dim,
                self.sparse_dims,
                self.num_classes,
                self.samples,
                seed,
                margin=self.margin,
                val_fraction=self.val_fraction,
            )
        raise ValueError(f"unknown synthetic kind {self.kind!r}")


@dataclass
class ExperimentConfig:
    """One sweep: a base configuration plus a single swept axis."""

    devices: int = 2
    batch_size: int = 20
    local_episodes: int = 5
    learning_rate: float = 0.01
    epochs: int = 100
    repetitions: int = 10
    base_seed: int = 0
    init_mode: str = "random"
    dataset: SyntheticSpec | str = field(default_factory=SyntheticSpec)
    sweep_param: str = "devices"
    sweep_values: list = field(default_factory=lambda: [1, 2, 4, 8])

    def __post_init__(self) -> None:
        if self.sweep_param not in SWEEP_AXES:
            raise ValueError(f"sweep_param must be one of {SWEEP_AXES}, got {self.sweep_param!r}")
        if not self.sweep_values:
            raise ValueError("sweep_values must be non-empty")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")


@dataclass(eq=False)
class EpochStats:
    epoch: int
    examples_seen: int
    val_acc_mean: float
    val_acc_std: float
    train_acc_mean: float
    train_acc_std: float


@dataclass(eq=False)
class SweepPoint:
    sweep_value: object
    epochs: list[EpochStats]


@dataclass(eq=False)
class SweepResult:
    sweep_param: str
    points: list[SweepPoint]


def _resolve_dataset(cfg: ExperimentConfig, rep_seed) -> data_mod.EmbeddingDataset:
    if isinstance(cfg.dataset, SyntheticSpec):
        return cfg.dataset.build(rep_seed)
    return data_mod.load_dataset(cfg.dataset)


def _point_config(cfg: ExperimentConfig, value) -> tuple[RoundConfig, str]:
    """Apply one sweep value, returning the round config and init mode."""
    fields = {
        "num_devices": cfg.devices,
        "batch_size": cfg.batch_size,
        "local_episodes": cfg.local_episodes,
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
    }
    init_mode = cfg.init_mode
    if cfg.sweep_param == "devices":
        fields["num_devices"] = int(value)
    elif cfg.sweep_param == "batch_size":
        fields["batch_size"] = int(value)
    elif cfg.sweep_param == "local_episodes":
        fields["local_episodes"] = int(value)
    else:
        init_mode = str(value)
    return RoundConfig(**fields), init_mode


def make_pretrained_blob(embedding_dim: int, num_classes: int, seed) -> ModelBlob:
    """Train a head centrally on a source task and hand back its parameters.

    The source task is a separate synthetic problem (different centroids),
    so reusing the blob exercises genuine transfer rather than a re-run of
    the target task.
    """
    source_seed = np.random.SeedSequence([int(seed), 0x5eed])
    data_ss, part_ss, init_ss = source_seed.spawn(3)
    source = data_mod.synth_separable(
        embedding_dim, num_classes, 2600, 4.0, data_ss, val_fraction=0.2
    )
    parts = data_mod.partition(source, 1, part_ss)
    cfg = RoundConfig(
        num_devices=1, batch_size=20, local_episodes=1, learning_rate=0.01, epochs=100
    )
    result = run_training(cfg, parts, source.validation_samples(), "random", init_seed=init_ss)
    return result.final_blob


def _run_repetition(
    round_cfg: RoundConfig,
    cfg: ExperimentConfig,
    init_mode: str,
    rep_seed: int,
    pretrained: ModelBlob | None,
) -> RunResult:
    root = np.random.SeedSequence([rep_seed])
    data_ss, part_ss, init_ss = root.spawn(3)
    dataset = _resolve_dataset(cfg, data_ss)
    parts = data_mod.partition(dataset, round_cfg.num_devices, part_ss)
    val = dataset.validation_samples()
    if init_mode == "pretrained":
        return run_training(round_cfg, parts, val, "pretrained", init_blob=pretrained)
    return run_training(round_cfg, parts, val, init_mode, init_seed=init_ss)


def run_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Run every sweep point for `repetitions` seeded repetitions each."""
    needs_pretrained = cfg.init_mode == "pretrained" or (
        cfg.sweep_param == "init_mode" and "pretrained" in [str(v) for v in cfg.sweep_values]
    )
    pretrained = None
    if needs_pretrained:
        if isinstance(cfg.dataset, SyntheticSpec):
            e, c = cfg.dataset.embedding_dim, cfg.dataset.num_classes
        else:
            probe = data_mod.load_dataset(cfg.dataset)
            e, c = probe.embedding_dim, probe.num_classes
        pretrained = make_pretrained_blob(e, c, cfg.base_seed)
    points = []
    for value in cfg.sweep_values:
        round_cfg, init_mode = _point_config(cfg, value)
        val_curves = []
        train_curves = []
        for r in range(cfg.repetitions):
            try:
                result = _run_repetition(
                    round_cfg, cfg, init_mode, cfg.base_seed + r, pretrained
                )
            except DataExhaustedError as exc:
                raise DataExhaustedError(
                    f"sweep point {cfg.sweep_param}={value}: {exc}"
                ) from exc
            val_curves.append([rec.val_accuracy for rec in result.history])
            train_curves.append([rec.train_accuracy for rec in result.history])
        val_arr = np.asarray(val_curves)
        train_arr = np.asarray(train_curves)
        epochs = [
            EpochStats(
                epoch=t + 1,
                examples_seen=round_cfg.num_devices * round_cfg.batch_size * (t + 1),
                val_acc_mean=float(val_arr[:, t].mean()),
                val_acc_std=float(val_arr[:, t].std()),
                train_acc_mean=float(train_arr[:, t].mean()),
                train_acc_std=float(train_arr[:, t].std()),
            )
            for t in range(round_cfg.epochs)
        ]
        points.append(SweepPoint(sweep_value=value, epochs=epochs))
    return SweepResult(sweep_param=cfg.sweep_param, points=points)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def emit_csv(result: SweepResult, path) -> None:
    """Write one row per (sweep value, epoch). Deterministic byte-for-byte."""
    lines = [CSV_COLUMNS]
    for point in result.points:
        for s in point.epochs:
            lines.append(
                f"{result.sweep_param},{point.sweep_value},{s.epoch},{s.examples_seen},"
                f"{_fmt(s.val_acc_mean)},{_fmt(s.val_acc_std)},"
                f"{_fmt(s.train_acc_mean)},{_fmt(s.train_acc_std)}"
            )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def default_presets() -> dict[str, ExperimentConfig]:
    """Named sweep presets over the default synthetic separable task.

    fig1: init mode (random vs pretrained), 2 devices, batch 20, 5 episodes.
    fig2: device count {1,2,4,8}, batch 20, 5 episodes.
    fig3: batch size {1,5,20,50}, 2 devices, 5 episodes.
    fig4: local episodes {1,3,5,6}, 2 devices, batch 20, 20 repetitions.
    """
    base = ExperimentConfig(
        devices=2,
        batch_size=20,
        local_episodes=5,
        learning_rate=0.01,
        epochs=100,
        repetitions=10,
        base_seed=0,
        init_mode="random",
        dataset=SyntheticSpec(),
        sweep_param="devices",
        sweep_values=[1, 2, 4, 8],
    )
    return {
        "fig1": dataclasses.replace(
            base, sweep_param="init_mode", sweep_values=["random", "pretrained"]
        ),
        "fig2": dataclasses.replace(base),
        "fig3": dataclasses.replace(
            base, sweep_param="batch_size", sweep_values=[1, 5, 20, 50]
        ),
        "fig4": dataclasses.replace(
            base,
            sweep_param="local_episodes",
            sweep_values=[1, 3, 5, 6],
            repetitions=20,
        ),
    }


_INT_KEYS = {"devices", "batch_size", "local_episodes", "epochs", "repetitions", "base_seed"}
_FLOAT_KEYS = {"learning_rate"}
_SYNTH_INT_KEYS = {
    "synth_dim": "embedding_dim",
    "synth_classes": "num_classes",
    "synth_samples": "samples",
    "synth_sparse_dims": "sparse_dims",
}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat key=value experiment format ('#' starts a comment)."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()

    cfg_kwargs: dict = {}
    synth_kwargs: dict = {}
    for key, value in pairs.items():
        if key in _INT_KEYS:
            cfg_kwargs[key] = int(value)
        elif key in _FLOAT_KEYS:
            cfg_kwargs[key] = float(value)
        elif key == "init_mode":
            cfg_kwargs[key] = value
        elif key == "sweep_param":
            cfg_kwargs[key] = value
        elif key == "sweep_values":
            cfg_kwargs[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "dataset":
            cfg_kwargs[key] = value
        elif key in _SYNTH_INT_KEYS:
            synth_kwargs[_SYNTH_INT_KEYS[key]] = int(value)
        elif key == "synth_margin":
            synth_kwargs["margin"] = float(value)
        elif key == "synth_val_fraction":
            synth_kwargs["val_fraction"] = float(value)
        else:
            raise ValueError(f"unknown config key {key!r}")

    dataset = cfg_kwargs.get("dataset", "synthetic-separable")
    if dataset in ("synthetic-separable", "synthetic-sparse"):
        kind = "separable" if dataset.endswith("separable") else "sparse"
        cfg_kwargs["dataset"] = SyntheticSpec(kind=kind, **synth_kwargs)
    elif synth_kwargs:
        raise ValueError("synth_* keys require dataset=synthetic-separable or synthetic-sparse")

    cfg = ExperimentConfig(**cfg_kwargs)
    if cfg.sweep_param != "init_mode":
        cfg.sweep_values = [int(v) for v in cfg.sweep_values]
    return cfg


def parse_config_file(path) -> ExperimentConfig:
    with open(path, "r") as fh:
        return parse_config_text(fh.read())
