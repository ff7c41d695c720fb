"""Config-driven experiment runner, aggregation and baseline-normalized scoring.

An experiment is a YAML file naming one ``kind`` plus grids over variants,
alpha, tau and seeds.  The grid expands into independent cells; every cell
writes its own CSV under ``<output_dir>/cells/``, the orchestrator then
folds those into ``aggregate.csv`` and writes ``manifest.json`` once.
Cells run in a process pool whose size is read from ``IMPLICITQ_WORKERS``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import subprocess
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from implicitq import __version__
from implicitq.agent import AgentConfig, train
from implicitq.dp import NoiseModel, RegularizationConfig, run_scheme, theorem1_equivalence_check
from implicitq.envs import make_env, random_policy_baseline
from implicitq.tabular import ParameterError, generate_garnet

log = logging.getLogger(__name__)

KINDS = ("dp_equivalence", "error_propagation", "deep_train", "ablation_suite",
         "temperature_sweep")
DEEP_KINDS = ("deep_train", "ablation_suite", "temperature_sweep")
WORKERS_ENV = "IMPLICITQ_WORKERS"

# per-kind (x column, metric column) of the cell tables
_COLUMNS = {
    "dp_equivalence": (None, "max_policy_deviation"),
    "error_propagation": ("step", "distance"),
    "deep_train": ("env_step", "eval_return_mean"),
    "ablation_suite": ("env_step", "eval_return_mean"),
    "temperature_sweep": ("env_step", "eval_return_mean"),
}
_CELL_KEYS = ("variant", "alpha", "tau", "seed")


class ScoringError(ValueError):
    """Normalization with a (near) zero denominator."""


def normalized_score(alg_return, random_return, baseline_return):
    """(alg - random) / (baseline - random): 0 at random, 1 at baseline."""
    denom = baseline_return - random_return
    if not np.isfinite(denom) or abs(denom) < 1e-12:
        raise ScoringError(f"degenerate normalization: baseline {baseline_return} vs random "
                           f"{random_return}")
    return (alg_return - random_return) / denom


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seeds: tuple
    variants: tuple = ("iq",)
    alphas: tuple = (0.9,)
    taus: tuple = (0.01,)
    output_dir: str = "runs/experiment"
    # tabular settings; n_states / n_actions may be [lo, hi] ranges drawn per seed
    mdp: dict = field(default_factory=lambda: {"n_states": 10, "n_actions": 3,
                                               "branching_factor": 3, "gamma": 0.9})
    n_steps: int = 200
    noise: dict = field(default_factory=lambda: {"kind": "none", "scale": 0.0})
    # deep settings
    env: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    total_steps: int = 20_000
    agent: dict = field(default_factory=dict)
    baseline_variants: tuple = ("iq", "m_iq")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        for name in ("seeds", "variants", "alphas", "taus", "baseline_variants"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ParameterError("seed list must be nonempty")
        if not self.variants or not self.alphas or not self.taus:
            raise ParameterError("variant, alpha and tau grids must be nonempty")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                raise ParameterError(f"alpha {a} outside [0, 1]")
        for t in self.taus:
            if not t > 0:
                raise ParameterError(f"tau {t} must be > 0")
        if self.n_steps < 1 or self.total_steps < 0:
            raise ParameterError("n_steps must be >= 1 and total_steps >= 0")
        if self.kind in DEEP_KINDS:
            for v in self.variants:
                AgentConfig(variant=v)  # validates the name
        NoiseModel(self.noise.get("kind", "none"), self.noise.get("scale", 0.0))

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def cells(self):
        """Expanded grid, in a fixed order."""
        variants = self.variants if self.kind in DEEP_KINDS else ("dp",)
        return [dict(zip(_CELL_KEYS, c))
                for c in itertools.product(variants, self.alphas, self.taus, self.seeds)]


def cell_name(cell):
    return "{variant}_a{alpha:g}_t{tau:g}_s{seed}".format(**cell)


def garnet_for_seed(mdp_settings, seed):
    """Garnet for one seed; list-valued sizes are drawn uniformly per seed."""
    rng = np.random.default_rng([seed, 7919])

    def pick(value):
        if isinstance(value, (list, tuple)):
            return int(rng.integers(value[0], value[1] + 1))
        return int(value)

    n_states = pick(mdp_settings.get("n_states", 10))
    n_actions = pick(mdp_settings.get("n_actions", 3))
    branching = min(pick(mdp_settings.get("branching_factor", 3)), n_states)
    return generate_garnet(n_states, n_actions, branching, seed,
                           gamma=float(mdp_settings.get("gamma", 0.9)))


def agent_config(config, cell):
    overrides = dict(config.agent)
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    return AgentConfig(**{**overrides, "variant": cell["variant"], "alpha": cell["alpha"],
                          "tau": cell["tau"]})


def run_cell(config, cell):
    """Execute one grid cell; returns its table as a list of row dicts."""
    kind = config.kind
    if kind == "dp_equivalence":
        mdp = garnet_for_seed(config.mdp, cell["seed"])
        dev = theorem1_equivalence_check(mdp, RegularizationConfig(cell["alpha"], cell["tau"]),
                                         config.n_steps)
        return [{"n_states": mdp.n_states, "n_actions": mdp.n_actions,
                 "max_policy_deviation": dev}]
    if kind == "error_propagation":
        mdp = garnet_for_seed(config.mdp, cell["seed"])
        noise = NoiseModel(config.noise.get("kind", "none"), float(config.noise.get("scale", 0.0)),
                           cell["seed"])
        trace = run_scheme(mdp, RegularizationConfig(cell["alpha"], cell["tau"]), noise,
                           config.n_steps)
        return list(trace.rows())
    env = make_env(config.env, cell["seed"], **config.env_params)
    result = train(env, agent_config(config, cell), config.total_steps, cell["seed"])
    return result.rows


def _write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for k, v in r.items()})


def read_rows(path):
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _parse(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _worker(args):
    doc, cell, out_dir = args
    config = ExperimentConfig.from_dict(doc)
    path = Path(out_dir) / "cells" / f"{cell_name(cell)}.csv"
    try:
        rows = run_cell(config, cell)
    except Exception as exc:  # recorded in the manifest, the run continues
        return cell, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    _write_rows(path, rows)
    return cell, str(path.relative_to(out_dir)), None


def worker_count(default=1):
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def code_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_experiment(config, output_dir=None, workers=None):
    """Run every cell, then write aggregate.csv, manifest.json and plot.py.

    Returns ``(path, n_failed)``.
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    doc = config.to_dict()
    jobs = [(doc, cell, str(out)) for cell in config.cells()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    cells, failed = [], 0
    for cell, path, error in results:
        cells.append({**cell, "file": path, "status": "ok" if error is None else "failed",
                      "error": error})
        if error is not None:
            failed += 1
            log.error("cell %s failed: %s", cell_name(cell), error.splitlines()[0])
    manifest = {"config": doc, "code_version": code_version(), "cells": cells,
                "n_failed": failed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    aggregate(out)
    write_plot_script(out)
    return out, failed


def load_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise ParameterError(f"no manifest.json in {run_dir}")
    return json.loads(path.read_text())


def _cell_tables(run_dir, manifest):
    for cell in manifest["cells"]:
        if cell["status"] == "ok":
            yield cell, read_rows(Path(run_dir) / cell["file"])


def _stats(values):
    v = np.asarray(values, dtype=float)
    return {"n": len(v), "mean": float(np.mean(v)), "median": float(np.median(v)),
            "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}


def aggregate(run_dir):
    """Fold cell CSVs into mean / median / std across seeds per (variant, alpha, tau, x)."""
    manifest = load_manifest(run_dir)
    x_col, metric = _COLUMNS[manifest["config"]["kind"]]
    groups = {}
    for cell, rows in _cell_tables(run_dir, manifest):
        for row in rows:
            key = (cell["variant"], cell["alpha"], cell["tau"], row[x_col] if x_col else 0)
            groups.setdefault(key, []).append(row[metric])
    out = []
    for (variant, alpha, tau, x), values in sorted(groups.items()):
        out.append({"variant": variant, "alpha": alpha, "tau": tau, x_col or "x": x,
                    **{f"{metric}_{k}": v for k, v in _stats(values).items()}})
    path = Path(run_dir) / "aggregate.csv"
    if out:
        _write_rows(path, out)
    else:
        path.write_text("")
    return path


@dataclass
class ScoreTable:
    """Normalized scores per (variant, alpha, tau, seed, env_step) and their aggregates."""

    random_return: float
    baseline_return: float
    baseline_label: str
    rows: list

    def final(self):
        """Final normalized score per (variant, alpha, tau) -> list over seeds."""
        last = {}
        for r in self.rows:
            key = (r["variant"], r["alpha"], r["tau"], r["seed"])
            if key not in last or r["env_step"] > last[key]["env_step"]:
                last[key] = r
        out = {}
        for (v, a, t, _), r in sorted(last.items()):
            out.setdefault((v, a, t), []).append(r["score"])
        return out

    def summary(self):
        return [{"variant": v, "alpha": a, "tau": t, **_stats(s)}
                for (v, a, t), s in self.final().items()]


def score_runs(run_dir, random_return=None, baseline_return=None):
    """Baseline-normalized scores of a deep run directory.

    Random returns default to the cached random-policy baseline of the env;
    the baseline defaults to the best final mean return among the
    ``baseline_variants`` present in the run.
    """
    manifest = load_manifest(run_dir)
    cfg = manifest["config"]
    if cfg["kind"] not in DEEP_KINDS:
        raise ParameterError(f"scoring applies to deep runs, not {cfg['kind']!r}")
    tables = list(_cell_tables(run_dir, manifest))
    if random_return is None:
        random_return = random_policy_baseline(cfg["env"], **cfg["env_params"])[0]
    label = "given"
    if baseline_return is None:
        finals = {}
        for cell, rows in tables:
            if cell["variant"] in cfg["baseline_variants"] and rows:
                key = (cell["variant"], cell["alpha"], cell["tau"])
                finals.setdefault(key, []).append(rows[-1]["eval_return_mean"])
        if not finals:
            raise ScoringError("no baseline-variant cells to normalize against")
        best = max(finals, key=lambda k: np.mean(finals[k]))
        baseline_return = float(np.mean(finals[best]))
        label = "{}_a{:g}_t{:g}".format(*best)
    rows = []
    for cell, cell_rows in tables:
        for r in cell_rows:
            rows.append({"variant": cell["variant"], "alpha": cell["alpha"], "tau": cell["tau"],
                         "seed": cell["seed"], "env_step": r["env_step"],
                         "score": normalized_score(r["eval_return_mean"], random_return,
                                                   baseline_return)})
    return ScoreTable(float(random_return), float(baseline_return), label, rows)


def write_scores(run_dir, table):
    run_dir = Path(run_dir)
    _write_rows(run_dir / "scores.csv", table.rows)
    curves = {}
    for r in table.rows:
        curves.setdefault((r["variant"], r["alpha"], r["tau"], r["env_step"]), []).append(
            r["score"])
    _write_rows(run_dir / "scores_aggregate.csv",
                [{"variant": v, "alpha": a, "tau": t, "env_step": s,
                  **{f"score_{k}": x for k, x in _stats(vals).items()}}
                 for (v, a, t, s), vals in sorted(curves.items())])
    (run_dir / "scores_meta.json").write_text(json.dumps(
        {"random_return": table.random_return, "baseline_return": table.baseline_return,
         "baseline": table.baseline_label}, indent=2))
    return run_dir / "scores_aggregate.csv"


_PLOT_TEMPLATE = '''"""Render mean and median curves from aggregate.csv (generated file)."""
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).parent
X, METRIC = {x!r}, {metric!r}
curves = {{}}
with open(here / "aggregate.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        key = "{{}} a={{}} tau={{}}".format(row["variant"], row["alpha"], row["tau"])
        curves.setdefault(key, []).append(
            (float(row[X]), float(row[METRIC + "_mean"]), float(row[METRIC + "_median"]),
             float(row[METRIC + "_std"])))
fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
for key, pts in sorted(curves.items()):
    pts.sort()
    xs = [p[0] for p in pts]
    mean = [p[1] for p in pts]
    std = [p[3] for p in pts]
    line, = axes[0].plot(xs, mean, label=key)
    axes[0].fill_between(xs, [m - s for m, s in zip(mean, std)],
                         [m + s for m, s in zip(mean, std)], alpha=0.2, color=line.get_color())
    axes[1].plot(xs, [p[2] for p in pts], label=key)
axes[0].set_title("mean +/- std")
axes[1].set_title("median")
for ax in axes:
    ax.set_xlabel(X)
    if {logy!r}:
        ax.set_yscale("log")
axes[0].set_ylabel(METRIC)
axes[1].legend(fontsize=7)
fig.tight_layout()
out = here / (sys.argv[1] if len(sys.argv) > 1 else "curves.png")
fig.savefig(out, dpi=120)
print(out)
'''


def write_plot_script(run_dir):
    manifest = load_manifest(run_dir)
    kind = manifest["config"]["kind"]
    x_col, metric = _COLUMNS[kind]
    path = Path(run_dir) / "plot.py"
    path.write_text(_PLOT_TEMPLATE.format(x=x_col or "x", metric=metric,
                                          logy=kind != "deep_train" and x_col != "env_step"))
    return path


def rerun_from_manifest(run_dir, output_dir, workers=None):
    """Re-execute the config stored in a manifest into a fresh directory."""
    cfg = ExperimentConfig.from_dict(load_manifest(run_dir)["config"])
    return run_experiment(replace(cfg, output_dir=str(output_dir)), output_dir, workers)
