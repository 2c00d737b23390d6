"""End-to-end pipeline: dataset synthesis, three training stages, and reports.

Stage 1 trains the teacher and the exit branches and profiles per-layer
entropy. Stage 2 calibrates the exit threshold on the training split and
trains the downstream head with exits active, recording span statistics.
Stage 3 evaluates every requested span strategy at every requested
inference ratio. The noise sweep and the static comparison reproduce the
noise-adaptivity and mixed-noise analyses.

All metric JSONs and CSVs are byte-deterministic for a fixed config;
wall-clock measurements go to a separate timing file, which is the one
artifact excluded from that guarantee.
"""

from __future__ import annotations

import configparser
import json
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .branches import entropy_profile, train_branches
from .data import (
    FrameDataset,
    MixtureSpec,
    NoiseSpec,
    SynthDatasetSpec,
    add_noise,
    make_mixture,
    synth_dataset,
)
from .encoder import EncoderConfig, init_encoder
from .errors import ConfigError, DependencyError
from .policy import (
    ExitPolicy,
    calibrate,
    constrain,
    load_policy,
    run_exit,
    save_policy,
)
from .probe import evaluate, evaluate_static, init_downstream_head, train_downstream
from .serialize import (
    Checkpoint,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .teacher import train_teacher

__all__ = [
    "RunConfig",
    "ArtifactPaths",
    "default_config",
    "load_config",
    "save_config",
    "apply_overrides",
    "stage_synth",
    "stage_teacher",
    "stage_branches",
    "stage_calibrate",
    "stage_downstream",
    "stage_eval",
    "noise_sweep",
    "compare_static",
    "run_pipeline",
]


@dataclass(frozen=True)
class RunConfig:
    # [data]
    num_train: int = 2000
    num_eval: int = 600
    frames: int = 32
    input_dim: int = 16
    num_classes: int = 32
    context_window: int = 9
    markov_self_prob: float = 0.85
    jitter_std: float = 1.0
    data_seed: int = 101
    # [encoder]
    num_layers: int = 8
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    max_frames: int = 64
    encoder_seed: int = 103
    # [teacher]
    teacher_lr: float = 0.5
    teacher_steps: int = 1200
    teacher_batch: int = 32
    # [branches]
    branch_lr: float = 0.05
    branch_steps: int = 4000
    branch_batch: int = 32
    # [policy]
    ratio: float = 1.0
    rate_cutoff: float = 0.15
    # [downstream]
    downstream_lr: float = 0.5
    downstream_steps: int = 1500
    downstream_batch: int = 32
    task: str = "frame"
    renormalize: bool = True
    # [train]
    train_seed: int = 105
    # [eval]
    strategies: tuple[str, ...] = ("unconstrained", "mean", "threshold", "minmax")
    eval_ratios: tuple[float, ...] = (1.0, 0.7)
    snr_levels: tuple[float, ...] = (10.0, 5.0, 0.0)
    sweep_ratio: float = 0.7
    mixture_fractions: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    static_layer: int = 4
    noise_kind: str = "gaussian"
    noise_seed: int = 107

    def __post_init__(self):
        if len(self.mixture_fractions) != len(self.snr_levels) + 1:
            raise ConfigError(
                "mixture needs one fraction for clean plus one per SNR level: "
                f"{len(self.mixture_fractions)} fractions, {len(self.snr_levels)} levels"
            )
        if not 1 <= self.static_layer <= self.num_layers:
            raise ConfigError(
                f"static_layer must be in 1..{self.num_layers}, got {self.static_layer}"
            )

    # Seed derivation: every stage draws from its own named stream.
    @property
    def teacher_seed(self) -> int:
        return self.train_seed + 1

    @property
    def branch_seed(self) -> int:
        return self.train_seed + 2

    @property
    def head_seed(self) -> int:
        return self.train_seed + 3

    @property
    def downstream_seed(self) -> int:
        return self.train_seed + 4

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            max_frames=self.max_frames,
            input_dim=self.input_dim,
            seed=self.encoder_seed,
        )

    def dataset_spec(self) -> SynthDatasetSpec:
        return SynthDatasetSpec(
            num_sequences=self.num_train + self.num_eval,
            frames=self.frames,
            input_dim=self.input_dim,
            num_classes=self.num_classes,
            context_window=self.context_window,
            markov_self_prob=self.markov_self_prob,
            jitter_std=self.jitter_std,
            seed=self.data_seed,
        )

    def mixture_spec(self) -> MixtureSpec:
        levels: list[float | None] = [None, *self.snr_levels]
        return MixtureSpec(
            parts=tuple(
                (NoiseSpec(snr_db=level, kind=self.noise_kind, seed=self.noise_seed), frac)
                for level, frac in zip(levels, self.mixture_fractions)
            )
        )


_SECTIONS = {
    "data": (
        "num_train", "num_eval", "frames", "input_dim", "num_classes",
        "context_window", "markov_self_prob", "jitter_std", "data_seed",
    ),
    "encoder": (
        "num_layers", "model_dim", "num_heads", "ffn_dim", "max_frames", "encoder_seed",
    ),
    "teacher": ("teacher_lr", "teacher_steps", "teacher_batch"),
    "branches": ("branch_lr", "branch_steps", "branch_batch"),
    "policy": ("ratio", "rate_cutoff"),
    "downstream": (
        "downstream_lr", "downstream_steps", "downstream_batch", "task", "renormalize",
    ),
    "train": ("train_seed",),
    "eval": (
        "strategies", "eval_ratios", "snr_levels", "sweep_ratio", "mixture_fractions",
        "static_layer", "noise_kind", "noise_seed",
    ),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def default_config() -> RunConfig:
    return RunConfig()


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {name} from {raw!r}")
    if kind == "str":
        return raw
    if kind == "tuple[str, ...]":
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if kind == "tuple[float, ...]":
        return tuple(float(part) for part in raw.split(",") if part.strip())
    raise ConfigError(f"unhandled config field type for {name}: {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | Path) -> RunConfig:
    """Read an INI config; keys absent from the file keep their defaults."""
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for section, names in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser.options(section):
            if key not in names:
                raise ConfigError(f"unknown config key [{section}] {key}")
            values[key] = _parse_value(key, parser.get(section, key))
    return RunConfig(**values)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply "section.key=value" style overrides (CLI flags win over the file)."""
    updates = {}
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


@dataclass(frozen=True)
class ArtifactPaths:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def config_file(self) -> Path:
        return self.root / "config.ini"

    @property
    def train_data(self) -> Path:
        return self.root / "train_data.bin"

    @property
    def eval_data(self) -> Path:
        return self.root / "eval_data.bin"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint.bin"

    @property
    def teacher_loss(self) -> Path:
        return self.root / "teacher_loss.csv"

    @property
    def branch_loss(self) -> Path:
        return self.root / "branch_loss.csv"

    @property
    def profile_heldout(self) -> Path:
        return self.root / "entropy_profile_heldout.csv"

    @property
    def profile_train(self) -> Path:
        return self.root / "entropy_profile_train.csv"

    @property
    def policy_file(self) -> Path:
        return self.root / "policy.txt"

    @property
    def span_stats(self) -> Path:
        return self.root / "span_stats.json"

    @property
    def exit_traces(self) -> Path:
        return self.root / "exit_traces_train.csv"

    @property
    def downstream_loss(self) -> Path:
        return self.root / "downstream_loss.csv"

    @property
    def metrics_dir(self) -> Path:
        return self.root / "metrics"

    @property
    def exit_distribution(self) -> Path:
        return self.root / "exit_distribution.csv"

    @property
    def exit_summary(self) -> Path:
        return self.root / "exit_summary.csv"

    @property
    def comparison_csv(self) -> Path:
        return self.root / "comparison.csv"

    @property
    def comparison_json(self) -> Path:
        return self.root / "comparison.json"

    @property
    def timing_file(self) -> Path:
        return self.root / "timing.json"


def _require(path: Path, stage: str, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(f"stage {stage!r} needs {path.name}; run {hint!r} first")
    return path


def _write_json(path: Path, record) -> None:
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines.extend(",".join(str(cell) for cell in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _snr_label(level: float | None) -> str:
    return "clean" if level is None else f"{level:g}"


def stage_synth(cfg: RunConfig, paths: ArtifactPaths) -> None:
    """Draw the full dataset once and split it into train and held-out files."""
    paths.root.mkdir(parents=True, exist_ok=True)
    full = synth_dataset(cfg.dataset_spec())
    save_dataset(full.subset(range(cfg.num_train)), paths.train_data)
    save_dataset(
        full.subset(range(cfg.num_train, cfg.num_train + cfg.num_eval)), paths.eval_data
    )


def stage_teacher(cfg: RunConfig, paths: ArtifactPaths) -> None:
    train = load_dataset(_require(paths.train_data, "train-teacher", "synth"))
    enc = init_encoder(cfg.encoder_config())
    result = train_teacher(
        enc,
        train,
        lr=cfg.teacher_lr,
        steps=cfg.teacher_steps,
        seed=cfg.teacher_seed,
        batch_size=cfg.teacher_batch,
    )
    save_checkpoint(Checkpoint(encoder=enc, teacher=result.head), paths.checkpoint)
    _write_csv(
        paths.teacher_loss,
        "step,loss",
        [(i, repr(loss)) for i, loss in enumerate(result.losses)],
    )


def stage_branches(cfg: RunConfig, paths: ArtifactPaths) -> None:
    train = load_dataset(_require(paths.train_data, "train-branches", "synth"))
    heldout = load_dataset(_require(paths.eval_data, "train-branches", "synth"))
    ck = load_checkpoint(_require(paths.checkpoint, "train-branches", "train-teacher"))
    if ck.teacher is None:
        raise DependencyError("stage 'train-branches' needs a teacher head; run 'train-teacher'")
    result = train_branches(
        ck.encoder,
        ck.teacher,
        train,
        lr=cfg.branch_lr,
        batch_size=cfg.branch_batch,
        steps=cfg.branch_steps,
        seed=cfg.branch_seed,
    )
    save_checkpoint(replace(ck, branches=result.branches), paths.checkpoint)
    _write_csv(
        paths.branch_loss,
        "step,layer,loss",
        [(step, layer, repr(loss)) for step, layer, loss in result.loss_rows],
    )
    profile = entropy_profile(ck.encoder, result.branches, heldout)
    _write_profile(paths.profile_heldout, profile)


def _write_profile(path: Path, profile) -> None:
    _write_csv(
        path,
        "layer,mean_entropy",
        [(k + 1, repr(m)) for k, m in enumerate(profile.layer_means)],
    )


def _loaded_pipeline(paths: ArtifactPaths, stage: str):
    ck = load_checkpoint(_require(paths.checkpoint, stage, "train-teacher"))
    if ck.branches is None:
        raise DependencyError(f"stage {stage!r} needs trained branches; run 'train-branches'")
    return ck


def stage_calibrate(cfg: RunConfig, paths: ArtifactPaths) -> ExitPolicy:
    """Profile the training split and fix the threshold at the configured ratio."""
    train = load_dataset(_require(paths.train_data, "calibrate", "synth"))
    ck = _loaded_pipeline(paths, "calibrate")
    profile = entropy_profile(ck.encoder, ck.branches, train)
    _write_profile(paths.profile_train, profile)
    policy = calibrate(profile, cfg.ratio)
    save_policy(policy, paths.policy_file)
    return policy


def stage_downstream(cfg: RunConfig, paths: ArtifactPaths) -> None:
    train = load_dataset(_require(paths.train_data, "train-downstream", "synth"))
    ck = _loaded_pipeline(paths, "train-downstream")
    policy = load_policy(_require(paths.policy_file, "train-downstream", "calibrate"))
    head = init_downstream_head(
        cfg.num_layers, train.num_classes, cfg.model_dim, cfg.head_seed
    )
    result = train_downstream(
        ck.encoder,
        ck.branches,
        policy,
        head,
        train,
        lr=cfg.downstream_lr,
        steps=cfg.downstream_steps,
        seed=cfg.downstream_seed,
        batch_size=cfg.downstream_batch,
        task=cfg.task,
        renormalize=cfg.renormalize,
    )
    save_checkpoint(replace(ck, downstream=result.head), paths.checkpoint)
    stats = result.span_stats
    _write_json(
        paths.span_stats,
        {
            "mean_exit": stats.mean_exit,
            "exit_rates": list(stats.exit_rates),
            "min_exit": stats.min_exit,
            "max_exit": stats.max_exit,
            "num_traces": stats.num_traces,
        },
    )
    num_layers = cfg.num_layers
    entropy_cols = ",".join(f"e{k}" for k in range(1, num_layers + 1))
    rows = []
    for t in result.traces:
        cells = [t.sample_id, t.exit_layer, t.layers_computed, int(t.forced)]
        cells.extend(
            repr(t.entropies[k]) if k in t.entropies else "" for k in range(1, num_layers + 1)
        )
        rows.append(cells)
    _write_csv(
        paths.exit_traces, f"sample_id,exit_layer,layers_computed,forced,{entropy_cols}", rows
    )
    _write_csv(
        paths.downstream_loss,
        "step,loss",
        [(i, repr(loss)) for i, loss in enumerate(result.losses)],
    )


def load_span_stats(paths: ArtifactPaths, stage: str):
    from .policy import SpanStats

    raw = json.loads(_require(paths.span_stats, stage, "train-downstream").read_text())
    return SpanStats(
        mean_exit=raw["mean_exit"],
        exit_rates=tuple(raw["exit_rates"]),
        min_exit=raw["min_exit"],
        max_exit=raw["max_exit"],
        num_traces=raw["num_traces"],
    )


def _strategy_policy(cfg, base_policy, strategy, stats) -> ExitPolicy:
    if strategy == "unconstrained":
        return base_policy
    return constrain(base_policy, strategy, stats, rate_cutoff=cfg.rate_cutoff)


def stage_eval(cfg: RunConfig, paths: ArtifactPaths) -> dict:
    """Evaluate every (strategy, inference ratio) pair on the held-out split.

    Span statistics always come from the training-time ratio; only the
    threshold is re-calibrated when the inference ratio differs.
    """
    heldout = load_dataset(_require(paths.eval_data, "eval", "synth"))
    train = load_dataset(_require(paths.train_data, "eval", "synth"))
    ck = _loaded_pipeline(paths, "eval")
    if ck.downstream is None:
        raise DependencyError("stage 'eval' needs a downstream head; run 'train-downstream'")
    _require(paths.policy_file, "eval", "calibrate")
    stats = load_span_stats(paths, "eval")
    profile = entropy_profile(ck.encoder, ck.branches, train)
    paths.metrics_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    summary = {}
    for ratio in cfg.eval_ratios:
        base = calibrate(profile, ratio)
        for strategy in cfg.strategies:
            name = f"{strategy}_ratio{ratio:g}"
            try:
                policy = _strategy_policy(cfg, base, strategy, stats)
            except ConfigError as err:
                summary[name] = {"error": str(err)}
                _write_json(paths.metrics_dir / f"eval_{name}.json", {"error": str(err)})
                continue
            record = evaluate(
                ck.encoder,
                ck.branches,
                policy,
                ck.downstream,
                heldout,
                task=cfg.task,
                renormalize=cfg.renormalize,
            )
            timings[name] = record.pop("timing")
            _write_json(paths.metrics_dir / f"eval_{name}.json", record)
            _write_csv(
                paths.metrics_dir / f"exit_hist_{name}.csv",
                "layer,count,fraction",
                [(layer, count, repr(frac)) for layer, count, frac in record["exit_histogram"]],
            )
            summary[name] = {
                "accuracy": record["accuracy"],
                "mean_exit_layer": record["mean_exit_layer"],
                "layer_compute_saved": record["layer_compute_saved"],
            }
    _write_json(paths.metrics_dir / "eval_summary.json", summary)
    _write_json(paths.timing_file, timings)
    return summary


def noise_sweep(
    cfg: RunConfig,
    paths: ArtifactPaths,
    snr_levels: tuple[float, ...] | None = None,
    ratio: float | None = None,
) -> list[dict]:
    """Exit-layer distribution per noise level (clean first), at one inference ratio.

    Uses the unconstrained policy so the full spread of exits is visible.
    """
    heldout = load_dataset(_require(paths.eval_data, "noise-sweep", "synth"))
    train = load_dataset(_require(paths.train_data, "noise-sweep", "synth"))
    ck = _loaded_pipeline(paths, "noise-sweep")
    levels: list[float | None] = [None, *(snr_levels if snr_levels is not None else cfg.snr_levels)]
    profile = entropy_profile(ck.encoder, ck.branches, train)
    policy = calibrate(profile, cfg.sweep_ratio if ratio is None else ratio)
    dist_rows = []
    summary_rows = []
    results = []
    for level in levels:
        spec = NoiseSpec(snr_db=level, kind=cfg.noise_kind, seed=cfg.noise_seed)
        noised = add_noise(heldout, spec)
        exits = np.array(
            [
                run_exit(ck.encoder, ck.branches, policy, noised.inputs[i], i)[1].exit_layer
                for i in range(noised.num_sequences)
            ],
            dtype=np.int64,
        )
        counts = np.bincount(exits, minlength=cfg.num_layers + 1)[1:]
        fractions = counts / exits.shape[0]
        label = _snr_label(level)
        for k in range(cfg.num_layers):
            dist_rows.append((label, k + 1, repr(float(fractions[k]))))
        summary_rows.append(
            (label, int(exits.min()), repr(float(exits.mean())), int(exits.max()))
        )
        results.append(
            {
                "snr": label,
                "mean_exit_layer": float(exits.mean()),
                "min_exit_layer": int(exits.min()),
                "max_exit_layer": int(exits.max()),
                "fractions": [float(f) for f in fractions],
            }
        )
    _write_csv(paths.exit_distribution, "snr,layer,fraction", dist_rows)
    _write_csv(paths.exit_summary, "snr,min_exit,mean_exit,max_exit", summary_rows)
    return results


def compare_static(
    cfg: RunConfig, paths: ArtifactPaths, static_layer: int | None = None
) -> list[dict]:
    """Accuracy of each span strategy vs. a fixed-depth truncation on the noise mixture.

    One row per (strategy, noise level), plus "all" rows over the whole
    mixture; the static baseline is matched on mean compute by reporting
    its depth and compute saved alongside.
    """
    heldout = load_dataset(_require(paths.eval_data, "compare-static", "synth"))
    train = load_dataset(_require(paths.train_data, "compare-static", "synth"))
    ck = _loaded_pipeline(paths, "compare-static")
    if ck.downstream is None:
        raise DependencyError(
            "stage 'compare-static' needs a downstream head; run 'train-downstream'"
        )
    stats = load_span_stats(paths, "compare-static")
    layer = cfg.static_layer if static_layer is None else static_layer
    if not 1 <= layer <= cfg.num_layers:
        raise ValueError(f"static layer {layer} out of range 1..{cfg.num_layers}")
    profile = entropy_profile(ck.encoder, ck.branches, train)
    base = calibrate(profile, cfg.ratio)
    mixed = make_mixture(heldout, cfg.mixture_spec(), cfg.noise_seed + 1)
    tags = np.array(mixed.tags)
    groups: list[tuple[str, FrameDataset]] = [("all", mixed)]
    for level in [None, *cfg.snr_levels]:
        label = _snr_label(level)
        idx = np.where(tags == ("clean" if level is None else f"snr{level:g}"))[0]
        if idx.size:
            groups.append((label, mixed.subset(idx)))
    rows = []
    for strategy in cfg.strategies:
        try:
            policy = _strategy_policy(cfg, base, strategy, stats)
        except ConfigError as err:
            rows.append(
                {
                    "strategy": strategy,
                    "noise_level": "all",
                    "error": str(err),
                }
            )
            continue
        for label, subset in groups:
            record = evaluate(
                ck.encoder,
                ck.branches,
                policy,
                ck.downstream,
                subset,
                task=cfg.task,
                renormalize=cfg.renormalize,
            )
            rows.append(
                {
                    "strategy": strategy,
                    "noise_level": label,
                    "accuracy": record["accuracy"],
                    "mean_exit": record["mean_exit_layer"],
                    "compute_saved": record["layer_compute_saved"],
                }
            )
    for label, subset in groups:
        record = evaluate_static(
            ck.encoder, ck.downstream, subset, layer, task=cfg.task, renormalize=cfg.renormalize
        )
        rows.append(
            {
                "strategy": f"static-{layer}",
                "noise_level": label,
                "accuracy": record["accuracy"],
                "mean_exit": float(layer),
                "compute_saved": record["layer_compute_saved"],
            }
        )
    _write_csv(
        paths.comparison_csv,
        "strategy,noise_level,accuracy,mean_exit,compute_saved",
        [
            (
                r["strategy"],
                r["noise_level"],
                repr(r["accuracy"]),
                repr(r["mean_exit"]),
                repr(r["compute_saved"]),
            )
            for r in rows
            if "error" not in r
        ],
    )
    _write_json(paths.comparison_json, rows)
    return rows


def run_pipeline(cfg: RunConfig, out_dir: str | Path) -> ArtifactPaths:
    """All three stages plus the noise-adaptivity and static-comparison reports."""
    paths = ArtifactPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, paths.config_file)
    started = time.perf_counter()
    for name, stage in (
        ("synth", stage_synth),
        ("train-teacher", stage_teacher),
        ("train-branches", stage_branches),
        ("calibrate", stage_calibrate),
        ("train-downstream", stage_downstream),
        ("eval", stage_eval),
    ):
        t0 = time.perf_counter()
        stage(cfg, paths)
        print(f"[pipeline] {name}: {time.perf_counter() - t0:.1f}s")
    noise_sweep(cfg, paths)
    compare_static(cfg, paths)
    print(f"[pipeline] reports done, total {time.perf_counter() - started:.1f}s")
    return paths
