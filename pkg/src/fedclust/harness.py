"""Config files, presets, repeated seeded runs and result files.

Experiment configs are YAML with four top-level sections::

    name: recovery
    repeat: 3
    scenario: {m_clients: 30, n_classes: 10, ...}
    run: {rounds: 95, rho: 0.3, ...}

Theory configs have a single ``theory`` section. Unknown keys are rejected
everywhere. Run ``r`` of a preset uses ``seed + r`` for both the scenario and
the optimiser.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .adaptive import Metric
from .datagen import ScenarioError, ScenarioSpec, generate_scenario
from .fedsim import DivergenceError, RunConfig, RunResult, run
from .theory import TheorySpec, generate_theory_instance, verify_contraction
from . import theory

TOP_LEVEL_KEYS = ("name", "repeat", "expect", "scenario", "run", "global_test_size")
RUN_KEYS = tuple(f.name for f in fields(RunConfig))
THEORY_KEYS = tuple(f.name for f in fields(TheorySpec))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentPreset:
    name: str
    scenario: ScenarioSpec
    run: RunConfig = field(default_factory=RunConfig)
    repeat: int = 1
    expect: tuple = ()
    global_test_size: int | None = None

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("name: must be non-empty")
        if self.repeat < 1:
            raise ConfigError("repeat: must be >= 1")
        try:
            self.scenario.validate()
            self.run.validate(self.scenario.num_clients)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# -- parsing ------------------------------------------------------------------

def _key_lines(text: str) -> dict[tuple, int]:
    """Map (section, key) -> 1-based line number, for error messages."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines = {}
    if isinstance(root, yaml.MappingNode):
        for knode, vnode in root.value:
            lines[(knode.value,)] = knode.start_mark.line + 1
            if isinstance(vnode, yaml.MappingNode):
                for k2, _ in vnode.value:
                    lines[(knode.value, k2.value)] = k2.start_mark.line + 1
    return lines


def _load(text: str, source: str) -> tuple[dict, dict]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}:{where} parse error: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data, _key_lines(text)


def _reject_unknown(section: dict, allowed, path: tuple, lines: dict, source: str) -> None:
    for key in section:
        if key not in allowed:
            line = lines.get(path + (key,))
            where = f" (line {line})" if line else ""
            name = ".".join(path + (str(key),))
            raise ConfigError(f"{source}: unknown key '{name}'{where}")


def _as_float(value, key: str) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _coerce_run(section: dict) -> RunConfig:
    defaults = RunConfig()
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in section:
            continue
        value = section[f.name]
        default = getattr(defaults, f.name)
        key = f"run.{f.name}"
        if f.name == "ablations":
            if isinstance(value, str):
                value = [value]
            kwargs[f.name] = tuple(sorted(str(v) for v in (value or ())))
        elif f.name in ("clients_per_round", "batch_size"):
            kwargs[f.name] = None if value is None else int(value)
        elif isinstance(default, bool):
            kwargs[f.name] = bool(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not float(value).is_integer():
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            kwargs[f.name] = int(value)
        elif isinstance(default, float):
            kwargs[f.name] = _as_float(value, key)
        else:
            kwargs[f.name] = str(value)
    return replace(defaults, **kwargs)


def preset_from_dict(data: dict, source: str = "<config>", lines: dict | None = None) -> ExperimentPreset:
    lines = lines or {}
    _reject_unknown(data, TOP_LEVEL_KEYS, (), lines, source)
    if "scenario" not in data:
        raise ConfigError(f"{source}: missing section 'scenario'")
    scen = data["scenario"] or {}
    runs = data.get("run") or {}
    if not isinstance(scen, dict) or not isinstance(runs, dict):
        raise ConfigError(f"{source}: 'scenario' and 'run' must be mappings")
    _reject_unknown(runs, RUN_KEYS, ("run",), lines, source)
    try:
        scenario = ScenarioSpec.from_config(scen)
    except ScenarioError as exc:
        raise ConfigError(f"{source}: scenario: {exc}") from None
    try:
        run_cfg = _coerce_run(runs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    gts = data.get("global_test_size")
    preset = ExperimentPreset(
        name=str(data.get("name", Path(source).stem)),
        scenario=scenario,
        run=run_cfg,
        repeat=int(data.get("repeat", 1)),
        expect=tuple(int(e) for e in (data.get("expect") or ())),
        global_test_size=None if gts is None else int(gts),
    )
    try:
        preset.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return preset


def parse_config_text(text: str, source: str = "<string>") -> ExperimentPreset:
    data, lines = _load(text, source)
    return preset_from_dict(data, source, lines)


def parse_config(path) -> ExperimentPreset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    return parse_config_text(path.read_text(), str(path))


def preset_to_dict(preset: ExperimentPreset) -> dict:
    run_cfg = asdict(preset.run)
    run_cfg["ablations"] = list(run_cfg["ablations"])
    out = {
        "name": preset.name,
        "repeat": preset.repeat,
        "expect": list(preset.expect),
        "scenario": preset.scenario.to_config(),
        "run": run_cfg,
    }
    if preset.global_test_size is not None:
        out["global_test_size"] = preset.global_test_size
    return out


def serialize(preset: ExperimentPreset) -> str:
    return yaml.safe_dump(preset_to_dict(preset), sort_keys=False)


def theory_from_dict(data: dict, source: str = "<config>", lines: dict | None = None) -> TheorySpec:
    lines = lines or {}
    _reject_unknown(data, ("theory",), (), lines, source)
    section = data.get("theory") or {}
    _reject_unknown(section, THEORY_KEYS, ("theory",), lines, source)
    kwargs = dict(section)
    if kwargs.get("cluster_fractions") is not None:
        kwargs["cluster_fractions"] = tuple(float(v) for v in kwargs["cluster_fractions"])
    try:
        spec = TheorySpec(**kwargs)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: theory: {exc}") from None
    return spec


def parse_theory_config(path) -> TheorySpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    data, lines = _load(path.read_text(), str(path))
    return theory_from_dict(data, str(path), lines)


# -- presets ------------------------------------------------------------------

def _recovery_scenario(**over) -> ScenarioSpec:
    base = dict(num_clients=30, num_classes=10, samples_per_client=200, feature_dim=10, lda_alpha=100.0,
                concept_count=3, beta=0.3, feature_shift_kinds=1)
    base.update(over)
    return ScenarioSpec(**base)


_ADAPTIVE_RUN = dict(rounds=95, lr=0.05, local_epochs=5, batch_size=32, mu_tilde=0.4,
                     split_warmup=10, split_cooldown=25)


def builtin_presets() -> dict[str, ExperimentPreset]:
    return {
        "quickstart": ExperimentPreset(
            "quickstart",
            ScenarioSpec(num_clients=6, num_classes=4, samples_per_client=60, feature_dim=4, lda_alpha=5.0,
                         concept_count=2, beta=0.5),
            RunConfig(rounds=10, lr=0.1, local_epochs=2, batch_size=16, rho=0.3, mu_tilde=0.4,
                      split_warmup=3, split_cooldown=3, embed_dim=4),
        ),
        "recovery": ExperimentPreset(
            "recovery", _recovery_scenario(), RunConfig(metric="cscp", rho=0.3, **_ADAPTIVE_RUN),
            repeat=3, expect=(6, 8),
        ),
        "principle-ascp": ExperimentPreset(
            "principle-ascp", _recovery_scenario(beta=0.0, feature_shift_kinds=3),
            RunConfig(metric="ascp", rho=0.3, **_ADAPTIVE_RUN), repeat=3, expect=(7,),
        ),
        "principle-cscp": ExperimentPreset(
            "principle-cscp", _recovery_scenario(beta=0.0, feature_shift_kinds=3),
            RunConfig(metric="cscp", rho=0.3, **_ADAPTIVE_RUN), repeat=3, expect=(7,),
        ),
        "single-model": ExperimentPreset(
            "single-model",
            ScenarioSpec(num_clients=8, num_classes=10, samples_per_client=100, feature_dim=3, lda_alpha=1.0,
                         concept_count=1),
            RunConfig(rounds=30, lr=0.1, local_epochs=2, initial_clusters=1, rho=math.inf, embed_dim=4),
            repeat=3,
            expect=(10,),
        ),
    }


def builtin_theory_presets() -> dict[str, TheorySpec]:
    return {
        "theory-balanced": TheorySpec(),
        "theory-imbalanced": TheorySpec(cluster_fractions=(0.8, 0.1, 0.1)),
        "theory-noisy": TheorySpec(sigma=0.1),
    }


def get_preset(name: str) -> ExperimentPreset:
    presets = builtin_presets()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    return presets[name]


# -- outputs ------------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def metrics_jsonl(metrics) -> str:
    return "".join(json.dumps(m.record(), sort_keys=True) + "\n" for m in metrics)


@dataclass
class RunSummary:
    index: int
    seed: int
    best_val: float
    best_test: float
    final_val: float
    final_test: float
    final_k: int
    diverged: bool = False


@dataclass
class PresetResult:
    preset: ExperimentPreset
    runs: list[RunSummary]
    results: list[RunResult]
    aggregate: dict


def summarize(index: int, seed: int, metrics, diverged: bool = False) -> RunSummary:
    if not metrics:
        nan = float("nan")
        return RunSummary(index, seed, nan, nan, nan, nan, 0, diverged)
    return RunSummary(
        index, seed,
        best_val=max(m.val_acc for m in metrics),
        best_test=max(m.test_acc for m in metrics),
        final_val=metrics[-1].val_acc,
        final_test=metrics[-1].test_acc,
        final_k=metrics[-1].k,
        diverged=diverged,
    )


def aggregate(runs: list[RunSummary]) -> dict:
    out = {}
    for key in ("best_val", "best_test", "final_val", "final_test", "final_k"):
        vals = np.array([getattr(r, key) for r in runs], dtype=float)
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def summary_csv(runs: list[RunSummary], agg: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["best_val", "best_test", "final_val", "final_test", "final_k"]
    w.writerow(["run", "seed", *cols, "diverged"])
    for r in runs:
        w.writerow([r.index, r.seed, *(f"{getattr(r, c):.6f}" for c in cols[:-1]), r.final_k, int(r.diverged)])
    w.writerow(["mean", "", *(f"{agg[c][0]:.6f}" for c in cols), ""])
    w.writerow(["std", "", *(f"{agg[c][1]:.6f}" for c in cols), ""])
    return buf.getvalue()


def seeded(preset: ExperimentPreset, index: int) -> tuple[ScenarioSpec, RunConfig]:
    scen = replace(preset.scenario, master_seed=preset.scenario.master_seed + index)
    return scen, replace(preset.run, seed=preset.run.seed + index)


def run_preset(preset: ExperimentPreset, out_dir=None) -> PresetResult:
    """Run every seed, writing per-run metrics and an aggregate summary.

    On divergence the finished runs and the partial metrics of the failing
    run are written before the error propagates.
    """
    preset.validate()
    out = Path(out_dir) if out_dir is not None else None
    runs, results = [], []

    def flush():
        if out is not None and runs:
            atomic_write(out / "summary.csv", summary_csv(runs, aggregate(runs)))

    for r in range(preset.repeat):
        scen, cfg = seeded(preset, r)
        clients, gtest = generate_scenario(scen, preset.global_test_size)
        metrics_path = None
        if out is not None:
            metrics_path = out / "metrics.jsonl" if preset.repeat == 1 else out / f"run{r}" / "metrics.jsonl"
        try:
            res = run(cfg, clients, gtest)
        except DivergenceError as exc:
            partial = getattr(exc, "metrics", [])
            if metrics_path is not None:
                atomic_write(metrics_path, metrics_jsonl(partial))
            runs.append(summarize(r, cfg.seed, partial, diverged=True))
            flush()
            raise
        if metrics_path is not None:
            atomic_write(metrics_path, metrics_jsonl(res.metrics))
        runs.append(summarize(r, cfg.seed, res.metrics))
        results.append(res)
    flush()
    return PresetResult(preset, runs, results, aggregate(runs))


ABLATION_VARIANTS = ((), ("gradcos",), ("gradcos", "noconf"), ("noconf",), ("mean",))


def run_ablation(preset: ExperimentPreset, metric: str | None = None, out_dir=None) -> dict[str, PresetResult]:
    """Run the base metric and each ablation; results are keyed by metric label."""
    base_metric = metric or preset.run.metric
    out = Path(out_dir) if out_dir is not None else None
    results = {}
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(["variant", "best_val_mean", "best_val_std", "best_test_mean", "best_test_std",
                "final_k_mean", "final_k_std"])
    for abl in ABLATION_VARIANTS:
        label = Metric(base_metric, frozenset(abl)).label
        variant = replace(preset, name=f"{preset.name}-{label}",
                          run=replace(preset.run, metric=base_metric, ablations=tuple(sorted(abl))))
        res = run_preset(variant, out / label if out is not None else None)
        results[label] = res
        a = res.aggregate
        w.writerow([label, *(f"{a[k][i]:.6f}" for k in ("best_val", "best_test", "final_k") for i in (0, 1))])
    if out is not None:
        atomic_write(out / "ablation.csv", rows.getvalue())
    return results


def run_theory(spec: TheorySpec, out_dir=None) -> dict:
    """Run the linear testbed; with noise, also run at twice the samples for the floor check."""
    report, _, _ = theory.run(spec)
    doubled = None
    if spec.sigma > 0:
        doubled, _, _ = theory.run(replace(spec, samples_per_client=2 * spec.samples_per_client))
    check = verify_contraction(report, doubled)
    summary = {
        **check.as_dict(),
        "eta": report.eta,
        "e0": report.e0,
        "c_min": report.c_min,
        "c_max": report.c_max,
        "n_hat": [float(v) for v in report.n_hat],
        "sigma_min_star": report.sigma_min_star,
        "kappa": report.kappa,
        "regime_ok": report.regime_ok,
        "final_dist": report.dists[-1],
        "theta_errors": report.theta_errors,
    }
    if out_dir is not None:
        out = Path(out_dir)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "dist", *(f"resid_{k}" for k in range(spec.K))])
        for t, d in enumerate(report.dists):
            res = report.residuals[t - 1] if t > 0 else [""] * spec.K
            w.writerow([t, repr(d), *(repr(v) if v != "" else "" for v in res)])
        atomic_write(out / "trace.csv", buf.getvalue())
        atomic_write(out / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
