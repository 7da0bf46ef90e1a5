"""Run experiments and sweeps, and write their CSV and JSON reports.

Every run writes two files into the output directory:

* ``results.csv``: one row per (config point, prompt) plus one aggregate row
  per point (``prompt_id == "mean"``), columns in :data:`CSV_COLUMNS` order;
* ``report.json``: the same points with their full configs and per-prompt
  run reports (round records only with ``verbose_rounds``).

Rows are sorted by config id then prompt id, floats are written with
``repr`` and JSON keys are sorted, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import models
from .config import DraftSpec, ExperimentConfig, SweepSpec, TargetSpec, to_dict
from .engine import ModelView, RunReport, generate_autoregressive, generate_speculative
from .models import MarkovModel
from .sampling import Rng

SCHEMA_VERSION = 1
OUT_DIR_ENV = "SPECLAB_OUT_DIR"
DEFAULT_OUT_DIR = "speclab-out"
CSV_NAME = "results.csv"
REPORT_NAME = "report.json"

CSV_COLUMNS = (
    "config_id", "method", "policy", "L", "temperature", "gamma", "lambda0",
    "dynamic_lambda", "cost_ratio", "prompt_id", "tokens", "sim_seconds", "tps",
    "acceptance_rate", "mean_accepted", "std_accepted", "residual_fallbacks", "seed",
)
AGGREGATE_PROMPT_ID = "mean"


@lru_cache(maxsize=16)
def build_target(spec: TargetSpec) -> MarkovModel:
    if spec.file is not None:
        return models.load(spec.file)
    return models.random_target(spec.vocab_size, spec.order, spec.concentration, spec.seed)


@lru_cache(maxsize=16)
def build_draft(spec: DraftSpec, target: TargetSpec) -> MarkovModel:
    if spec.file is not None:
        return models.load(spec.file)
    return models.derive_draft(build_target(target), spec.derived())


def make_prompts(cfg: ExperimentConfig, vocab_size: int) -> list[list[int]]:
    """Synthetic prompt corpus; its seed is independent of the run seed."""
    rng = np.random.default_rng(cfg.prompts.seed)
    return [rng.integers(0, vocab_size, cfg.prompts.length).tolist() for _ in range(cfg.prompts.count)]


@dataclass
class PointResult:
    config_id: str
    config: ExperimentConfig
    prompts: list[list[int]]
    reports: list[RunReport]


def run_point(config_id: str, cfg: ExperimentConfig, keep_rounds: bool = False) -> PointResult:
    """Generate from every prompt of one config point.

    Prompt ``i`` draws from ``Rng(cfg.seed, stream=i)``. The threshold
    controller restarts for each prompt unless ``policy.persist_controller``.
    """
    tm = build_target(cfg.target)
    cost = cfg.cost_model
    prompts = make_prompts(cfg, tm.vocab_size)
    reports: list[RunReport] = []
    if cfg.method == "autoregressive":
        view = ModelView(tm, cfg.sampling)
        for i, prompt in enumerate(prompts):
            _, rep = generate_autoregressive(
                tm, prompt, cfg.generation_length, cfg.sampling, Rng(cfg.seed, i), cost, keep_rounds, view
            )
            reports.append(rep)
        return PointResult(config_id, cfg, prompts, reports)

    dm = build_draft(cfg.draft, cfg.target)
    views = (ModelView(tm, cfg.sampling), ModelView(dm, cfg.sampling))
    controller = None
    for i, prompt in enumerate(prompts):
        _, rep = generate_speculative(
            tm, dm, prompt, cfg.generation_length, cfg.policy, cfg.sampling,
            Rng(cfg.seed, i), cost, keep_rounds, controller, views,
        )
        if cfg.policy.persist_controller:
            controller = rep.controller
        reports.append(rep)
    return PointResult(config_id, cfg, prompts, reports)


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _point_fields(res: PointResult) -> dict[str, Any]:
    cfg = res.config
    spd = cfg.method != "autoregressive"
    pol = cfg.policy
    return {
        "config_id": res.config_id,
        "method": cfg.method,
        "policy": pol.kind if spd else "none",
        "L": pol.max_draft_length if spd else None,
        "temperature": cfg.sampling.temperature,
        "gamma": pol.gamma if pol.kind == "adaedl" and spd else None,
        "lambda0": pol.initial_lambda if spd and pol.kind != "static" else None,
        "dynamic_lambda": pol.dynamic_lambda if spd and pol.kind != "static" else None,
        "cost_ratio": cfg.cost_model.cost_ratio,
        "seed": cfg.seed,
    }


def point_rows(res: PointResult) -> list[dict[str, Any]]:
    """Per-prompt rows followed by the aggregate row.

    The aggregate averages tps, acceptance_rate, mean_accepted and
    std_accepted over prompts, and sums tokens, sim_seconds and fallbacks.
    """
    base = _point_fields(res)
    rows = []
    for i, rep in enumerate(res.reports):
        rows.append({
            **base,
            "prompt_id": i,
            "tokens": rep.total_tokens_emitted,
            "sim_seconds": rep.total_simulated_seconds,
            "tps": rep.tps,
            "acceptance_rate": rep.acceptance_rate,
            "mean_accepted": rep.mean_accepted,
            "std_accepted": rep.std_accepted,
            "residual_fallbacks": rep.residual_fallback_count,
        })

    def mean(key: str) -> float:
        vals = [r[key] for r in rows]
        return math.nan if any(math.isnan(v) for v in vals) else math.fsum(vals) / len(vals)

    rows.append({
        **base,
        "prompt_id": AGGREGATE_PROMPT_ID,
        "tokens": sum(r["tokens"] for r in rows),
        "sim_seconds": math.fsum(r["sim_seconds"] for r in rows),
        "tps": mean("tps"),
        "acceptance_rate": mean("acceptance_rate"),
        "mean_accepted": mean("mean_accepted"),
        "std_accepted": mean("std_accepted"),
        "residual_fallbacks": sum(r["residual_fallbacks"] for r in rows),
    })
    return rows


def csv_text(results: Iterable[PointResult]) -> str:
    rows = [row for res in results for row in point_rows(res)]

    def key(row):
        pid = row["prompt_id"]
        return (row["config_id"], pid == AGGREGATE_PROMPT_ID, pid if isinstance(pid, int) else 0)

    rows.sort(key=key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def report_json(results: Sequence[PointResult], kind: str, verbose_rounds: bool, axes: Any = None) -> str:
    points = []
    for res in sorted(results, key=lambda r: r.config_id):
        rows = point_rows(res)
        points.append({
            "config_id": res.config_id,
            "config": to_dict(res.config),
            "aggregate": rows[-1],
            "prompts": [
                {"prompt_id": i, "prompt": prompt, **rep.to_dict(include_rounds=verbose_rounds)}
                for i, (prompt, rep) in enumerate(zip(res.prompts, res.reports))
            ],
        })
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "csv_columns": list(CSV_COLUMNS),
        "verbose_rounds": verbose_rounds,
        "points": points,
    }
    if axes is not None:
        doc["axes"] = [[name, list(values)] for name, values in axes]
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def resolve_out_dir(cli_out: str | None, cfg: ExperimentConfig | None = None) -> Path:
    """``--out`` wins, then the config's ``output_dir``, then the environment."""
    if cli_out:
        return Path(cli_out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR))


def _write(out_dir: Path, csv_body: str, report: str) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / CSV_NAME, out_dir / REPORT_NAME
    csv_path.write_text(csv_body, encoding="utf-8")
    json_path.write_text(report, encoding="utf-8")
    return csv_path, json_path


def run_experiment(cfg: ExperimentConfig, out_dir: Path, verbose_rounds: bool = False) -> tuple[Path, Path]:
    res = run_point("p0000", cfg, verbose_rounds)
    return _write(out_dir, csv_text([res]), report_json([res], "run", verbose_rounds))


def _run_point_args(args: tuple[str, ExperimentConfig, bool]) -> PointResult:
    return run_point(*args)


def run_sweep_points(sweep: SweepSpec, workers: int = 1, verbose_rounds: bool = False) -> list[PointResult]:
    # Expanding the points enforces the cap before any generation starts.
    points = sweep.points()
    jobs = [(f"p{i:04d}", cfg, verbose_rounds) for i, cfg in enumerate(points)]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_point_args(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point_args, jobs))


def run_sweep(
    sweep: SweepSpec, out_dir: Path, workers: int = 1, verbose_rounds: bool = False
) -> tuple[Path, Path]:
    results = run_sweep_points(sweep, workers, verbose_rounds)
    return _write(out_dir, csv_text(results), report_json(results, "sweep", verbose_rounds, sweep.axes))


# -------------------------------------------------------------- histogram

class MissingRoundsError(ValueError):
    pass


@dataclass
class HistogramRow:
    config_id: str
    method: str
    max_draft_length: int
    counts: list[int]

    @property
    def n_rounds(self) -> int:
        return sum(self.counts)

    @property
    def mean(self) -> float:
        return sum(k * c for k, c in enumerate(self.counts)) / self.n_rounds

    @property
    def std(self) -> float:
        m = self.mean
        return math.sqrt(sum(c * (k - m) ** 2 for k, c in enumerate(self.counts)) / self.n_rounds)


def accepted_histograms(report: dict) -> list[HistogramRow]:
    """Accepted-count histograms per speculative config point.

    Counts come from the round records, which exist only for runs made with
    ``verbose_rounds``.
    """
    rows = []
    for point in report["points"]:
        cfg = point["config"]
        if cfg["method"] == "autoregressive":
            continue
        L = cfg["policy"]["max_draft_length"]
        counts = [0] * (L + 1)
        for prompt in point["prompts"]:
            rounds = prompt.get("rounds")
            if rounds is None:
                raise MissingRoundsError(
                    f"point {point['config_id']} has no round records; rerun with --verbose-rounds"
                )
            for r in rounds:
                counts[r["n_accepted"]] += 1
        rows.append(HistogramRow(point["config_id"], cfg["method"], L, counts))
    if not rows:
        raise MissingRoundsError("report has no speculative runs with round records")
    return rows


def histogram_csv(rows: Sequence[HistogramRow]) -> str:
    width = max(r.max_draft_length for r in rows) + 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config_id", "method", "L", "rounds", "mean", "std", *[f"n{k}" for k in range(width)]])
    for r in rows:
        padded = r.counts + [""] * (width - len(r.counts))
        writer.writerow([r.config_id, r.method, r.max_draft_length, r.n_rounds, repr(r.mean), repr(r.std), *padded])
    return buf.getvalue()
