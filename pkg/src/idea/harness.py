"""Experiment runner: flat config files, variant runs, per-step CSV logs and aggregate reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .assets import AssetLibrary, load_library, save_library
from .controller import VARIANTS, ControllerConfig, IdeaController
from .errors import ConfigError, InvalidInputError
from .fusion import FusionStack
from .prompt import OptimizerConfig
from .stats import StatsConfig
from .stream import StreamConfig, bootstrap_source_stats, generate_stream, make_domains, oracle_action

log = logging.getLogger(__name__)

STEP_COLUMNS = (
    "repetition", "episode", "cycle", "domain", "step", "variant",
    "d0", "dp", "d_act", "covered", "optimization_invoked", "prompt_source",
    "action", "oracle_action", "accuracy_vs_oracle", "entropy", "library_size",
    "projected", "projection_gap",
)
TIMING_COLUMNS = ("repetition", "episode", "step", "wall_time")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    seed: int = 0
    anchor_samples: int = 128
    anchor_seed: int = 12345

    def __post_init__(self):
        if self.num_layers < 1:
            raise InvalidInputError("num_layers must be >= 1")
        if self.anchor_samples < 2:
            raise InvalidInputError("anchor_samples must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "idea"
    repetitions: int = 1
    seed: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError("experiment.variant", f"must be one of {VARIANTS}")
        if self.repetitions < 1:
            raise ConfigError("experiment.repetitions", "must be >= 1")

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return dataclasses.replace(self, variant=variant)


# section prefix -> (path into ExperimentConfig, dataclass type)
_SECTIONS = {
    "controller": ("controller", ControllerConfig),
    "opt": ("controller.opt", OptimizerConfig),
    "stats": ("controller.stats", StatsConfig),
    "stream": ("stream", StreamConfig),
    "model": ("model", ModelConfig),
}
_EXPERIMENT_KEYS = {"variant": str, "repetitions": int, "seed": int, "out_dir": str}
_ALIASES = {"controller.lambda": "controller.lam"}
_NESTED = {"opt", "stats", "variant"}


def _scalar_fields(cls):
    return {f.name: type(f.default) for f in dataclasses.fields(cls) if f.name not in _NESTED}


def _coerce(key, raw, typ):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is type(None):
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``section.field = value`` lines; ``#`` starts a comment."""
    values: Dict[str, Dict[str, object]] = {name: {} for name in _SECTIONS}
    experiment: Dict[str, object] = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in seen:
            raise ConfigError(key, "duplicate key")
        seen.add(key)
        section, _, name = key.partition(".")
        if section == "experiment" and name in _EXPERIMENT_KEYS:
            experiment[name] = _coerce(key, raw, _EXPERIMENT_KEYS[name])
            continue
        if section not in _SECTIONS or name not in _scalar_fields(_SECTIONS[section][1]):
            raise ConfigError(key, "unknown configuration key")
        values[section][name] = _coerce(key, raw, _scalar_fields(_SECTIONS[section][1])[name])

    variant = experiment.get("variant", "idea")
    if variant not in VARIANTS:
        raise ConfigError("experiment.variant", f"must be one of {VARIANTS}")

    def build(section, **extra):
        cls = _SECTIONS[section][1]
        try:
            return cls(**values[section], **extra)
        except InvalidInputError as exc:
            # name the key when only one was set in this section
            names = sorted(values[section])
            raise ConfigError(f"{section}.{names[0]}" if len(names) == 1 else section, str(exc)) from None

    controller = build("controller", opt=build("opt"), stats=build("stats"), variant=variant)
    return ExperimentConfig(
        controller=controller,
        stream=build("stream"),
        model=build("model"),
        variant=variant,
        repetitions=experiment.get("repetitions", 1),
        seed=experiment.get("seed", 1),
        out_dir=experiment.get("out_dir", "runs"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config``: every field, one per line."""
    lines = []
    objs = {"controller": cfg.controller, "opt": cfg.controller.opt, "stats": cfg.controller.stats,
            "stream": cfg.stream, "model": cfg.model}
    for section, obj in objs.items():
        for name in _scalar_fields(type(obj)):
            lines.append(f"{section}.{name} = {_fmt(getattr(obj, name))}")
    for name in _EXPERIMENT_KEYS:
        lines.append(f"experiment.{name} = {_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


@dataclass
class RunArtifacts:
    stack: FusionStack
    domains: list
    anchor: object


def build_world(cfg: ExperimentConfig) -> RunArtifacts:
    """Stack, domains and anchor; all seeded from the model/stream sections only."""
    scfg = cfg.stream
    stack = FusionStack.random(cfg.model.num_layers, scfg.feature_dim, seed=cfg.model.seed)
    domains = make_domains(scfg)
    anchor = bootstrap_source_stats(
        stack, domains[scfg.source_domain_index], cfg.model.anchor_samples, cfg.controller.stats,
        rng=cfg.model.anchor_seed, num_candidates=scfg.num_candidates,
        instruction_scale=scfg.instruction_scale,
    )
    return RunArtifacts(stack, domains, anchor)


def run_repetition(cfg: ExperimentConfig, repetition: int, world: Optional[RunArtifacts] = None,
                   library: Optional[AssetLibrary] = None):
    """One pass over the stream. Returns (step rows, timings, final library)."""
    world = build_world(cfg) if world is None else world
    ctl_cfg = dataclasses.replace(cfg.controller, variant=cfg.variant, seed=cfg.controller.seed + repetition)
    controller = IdeaController(world.stack, world.anchor, ctl_cfg, None if library is None else library.copy())
    source = world.domains[cfg.stream.source_domain_index]
    rows, timings = [], []
    for ep in generate_stream(cfg.stream, cfg.seed + repetition, world.domains):
        outcomes = controller.run_episode(ep.observations)
        domain = world.domains[ep.domain_index]
        for t, (obs, out) in enumerate(zip(ep.observations, outcomes)):
            oracle = oracle_action(world.stack, source, domain, obs)
            rows.append({
                "repetition": repetition, "episode": ep.episode_index, "cycle": ep.cycle,
                "domain": ep.domain_index, "step": t, "variant": cfg.variant,
                "d0": out.d0, "dp": out.dp, "d_act": out.d_act, "covered": out.covered,
                "optimization_invoked": out.optimization_invoked, "prompt_source": out.prompt_source,
                "action": out.action, "oracle_action": oracle, "accuracy_vs_oracle": int(out.action == oracle),
                "entropy": out.entropy, "library_size": out.library_size,
                "projected": out.projected, "projection_gap": out.projection_gap,
            })
            timings.append({"repetition": repetition, "episode": ep.episode_index, "step": t,
                            "wall_time": out.wall_time})
    return rows, timings, controller.library


def _reduction(row) -> float:
    return 0.0 if row["d0"] == 0 else (row["d0"] - row["d_act"]) / row["d0"]


def summarize(rows: Sequence[dict]) -> dict:
    """Per-run summary; ``rows`` are one repetition's step rows."""
    if not rows:
        raise InvalidInputError("cannot summarize an empty run")
    cycles = sorted({r["cycle"] for r in rows})
    gaps = [r["projection_gap"] for r in rows if r["projection_gap"] is not None]

    def mean(xs):
        return float(np.mean(xs)) if len(xs) else 0.0

    return {
        "num_steps": len(rows),
        "coverage_rate": mean([r["covered"] for r in rows]),
        "coverage_rate_by_cycle": [mean([r["covered"] for r in rows if r["cycle"] == c]) for c in cycles],
        "optimization_rate_by_cycle": [mean([r["optimization_invoked"] for r in rows if r["cycle"] == c]) for c in cycles],
        "mean_discrepancy_reduction": mean([_reduction(r) for r in rows]),
        "mean_final_discrepancy": mean([r["d_act"] for r in rows]),
        "mean_bridge_ratio_covered": mean([r["dp"] / r["d0"] for r in rows if r["covered"] and r["d0"] > 0]),
        "total_optimizations": int(sum(r["optimization_invoked"] for r in rows)),
        "mean_accuracy": mean([r["accuracy_vs_oracle"] for r in rows]),
        "final_library_size": int(rows[-1]["library_size"]),
        "projection_gap_stats": {
            "count": len(gaps),
            "mean": mean(gaps),
            "max": float(max(gaps)) if gaps else 0.0,
        },
    }


def _csv_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def _write_csv(path: Path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_csv_value(r[c]) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


_INT_COLUMNS = {"repetition", "episode", "cycle", "domain", "step", "action", "oracle_action",
                "accuracy_vs_oracle", "library_size"}
_BOOL_COLUMNS = {"covered", "optimization_invoked", "projected"}
_STR_COLUMNS = {"variant", "prompt_source"}


def read_steps(path) -> List[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in _INT_COLUMNS:
                    row[k] = int(v)
                elif k in _BOOL_COLUMNS:
                    row[k] = v == "true"
                elif k in _STR_COLUMNS:
                    row[k] = v
                else:
                    row[k] = None if v == "" else float(v)
            rows.append(row)
    return rows


@dataclass
class MetricsRecord:
    variant: str
    rows: List[dict]
    summaries: List[dict]
    out_dir: Optional[Path] = None

    @property
    def summary(self) -> dict:
        return self.summaries[0]


def run_experiment(cfg: ExperimentConfig, out_dir=None, assets_in=None, assets_out=None,
                   write: bool = True) -> MetricsRecord:
    """Run every repetition of ``cfg.variant`` and write ``steps.csv``, ``timing.csv`` and ``summary.json``.

    Each repetition starts from the ``assets_in`` library (or empty); ``assets_out``
    receives repetition 0's final library.
    """
    library = load_library(assets_in) if assets_in is not None else None
    world = build_world(cfg)
    rows, timings, summaries = [], [], []
    for rep in range(cfg.repetitions):
        log.info("variant %s repetition %d", cfg.variant, rep)
        r, t, lib = run_repetition(cfg, rep, world, library)
        rows += r
        timings += t
        summaries.append(summarize(r))
        if rep == 0 and assets_out is not None:
            save_library(lib, assets_out)
    record = MetricsRecord(cfg.variant, rows, summaries)
    if write:
        target = Path(cfg.out_dir if out_dir is None else out_dir)
        target.mkdir(parents=True, exist_ok=True)
        _write_csv(target / "steps.csv", STEP_COLUMNS, rows)
        # wall-clock time lives apart so that steps.csv stays byte-reproducible
        _write_csv(target / "timing.csv", TIMING_COLUMNS, timings)
        doc = {"variant": cfg.variant, "repetitions": summaries}
        (target / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (target / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
        record.out_dir = target
    return record


def load_record(run_dir) -> MetricsRecord:
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    return MetricsRecord(doc["variant"], read_steps(run_dir / "steps.csv"), doc["repetitions"], run_dir)


def find_records(root) -> List[MetricsRecord]:
    root = Path(root)
    dirs = sorted({p.parent for p in root.rglob("summary.json")})
    return [load_record(d) for d in dirs]


_AGG_FIELDS = ("coverage_rate", "mean_discrepancy_reduction", "mean_final_discrepancy",
               "total_optimizations", "mean_accuracy", "final_library_size")


def aggregate(records: Sequence[MetricsRecord]) -> Dict[str, Dict[str, tuple]]:
    """variant -> field -> (mean, std) over all repetitions of all records."""
    if not records:
        raise InvalidInputError("report needs at least one record")
    by_variant: Dict[str, List[dict]] = {}
    for rec in records:
        by_variant.setdefault(rec.variant, []).extend(rec.summaries)
    table = {}
    for variant, sums in by_variant.items():
        fields = {}
        for name in _AGG_FIELDS:
            xs = np.array([s[name] for s in sums], dtype=float)
            fields[name] = (float(xs.mean()), float(xs.std()))
        n_cycles = min(len(s["coverage_rate_by_cycle"]) for s in sums)
        for c in range(n_cycles):
            for name in ("coverage_rate_by_cycle", "optimization_rate_by_cycle"):
                xs = np.array([s[name][c] for s in sums])
                fields[f"{name.replace('_by_cycle', '')}_cycle{c + 1}"] = (float(xs.mean()), float(xs.std()))
        gaps = np.array([s["projection_gap_stats"]["max"] for s in sums])
        fields["projection_gap_max"] = (float(gaps.mean()), float(gaps.std()))
        table[variant] = fields
    return table


def _series(records: Sequence[MetricsRecord]) -> Dict[str, List[tuple]]:
    """variant -> rows of (global_step, cumulative coverage, reduction), averaged over repetitions."""
    by_variant: Dict[str, Dict[tuple, List[dict]]] = {}
    for rec in records:
        runs = by_variant.setdefault(rec.variant, {})
        for r in rec.rows:
            runs.setdefault((id(rec), r["repetition"]), []).append(r)
    out = {}
    for variant, runs in by_variant.items():
        length = min(len(v) for v in runs.values())
        cov = np.array([np.cumsum([r["covered"] for r in v[:length]]) / np.arange(1, length + 1) for v in runs.values()])
        red = np.array([[_reduction(r) for r in v[:length]] for v in runs.values()])
        lib = np.array([[r["library_size"] for r in v[:length]] for v in runs.values()])
        out[variant] = list(zip(range(length), cov.mean(0), red.mean(0), lib.mean(0)))
    return out


def report(records: Sequence[MetricsRecord], out_dir=None) -> str:
    """Aggregate table as text; with ``out_dir``, also per-variant columnar series files."""
    table = aggregate(records)
    names = list(next(iter(table.values())))
    lines = ["variant\tfield\tmean\tstd"]
    for variant in sorted(table):
        for name in names:
            if name in table[variant]:
                m, s = table[variant][name]
                lines.append(f"{variant}\t{name}\t{m:.6g}\t{s:.6g}")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "aggregate.tsv").write_text(text, encoding="utf-8")
        for variant, rows in _series(records).items():
            body = "step\tcumulative_coverage\tdiscrepancy_reduction\tlibrary_size\n" + "".join(
                f"{t}\t{c:.17g}\t{r:.17g}\t{k:.17g}\n" for t, c, r, k in rows
            )
            (out_dir / f"series_{variant}.tsv").write_text(body, encoding="utf-8")
    return text
