"""Perturbation sweeps with seeded repeats, consistent-trial selection and reports.

A sweep evaluates one perturbation kind over a magnitude grid and a list of
scopes.  Trial ``(point p, repeat r)`` uses seed
``derive_seed(master_seed, p, r)``; the seed does not depend on the scope, so
different scopes at the same point and repeat see paired random streams.
Results are gathered and sorted by (scope order, magnitude order, repeat)
before anything is written, so the worker count never changes an output
byte.  Wall time is only recorded when ``timing`` is on, since it would
otherwise break byte-identical reruns.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from . import checkpoint, perturb
from .data import DEFAULT_SEED, gen_split, load_dataset
from .evaluate import DEFAULT_FDR, EvalResult, score_dataset, sensitivity, tdr_at_fdr
from .network import Model
from .perturb import PerturbationSpec
from .tensor import derive_seed

log = logging.getLogger(__name__)

CSV_COLUMNS = ["scope", "kind", "magnitude", "seed", "tdr", "fdr_achieved", "sensitivity", "wall_ms"]

SWEEP_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "SweepConfig",
    "type": "object",
    "required": ["kind", "grid"],
    "additionalProperties": False,
    "properties": {
        "model_path": {"type": "string"},
        "kind": {"enum": list(perturb.KINDS)},
        "grid": {
            "oneOf": [
                {"type": "array", "items": {"type": "number"}, "minItems": 1},
                {
                    "type": "object",
                    "required": ["start", "stop", "step"],
                    "additionalProperties": False,
                    "properties": {
                        "start": {"type": "number"},
                        "stop": {"type": "number"},
                        "step": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            ]
        },
        "scopes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "repeats": {"type": "integer", "minimum": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "fdr_target": {"type": "number", "minimum": 0, "maximum": 100},
        "data_path": {"type": "string"},
        "data_split": {"type": "string"},
        "data_seed": {"type": "integer", "minimum": 0},
        "n_test": {"type": "integer", "minimum": 100},
        "workers": {"type": "integer", "minimum": 1},
        "timing": {"type": "boolean"},
    },
}


class SweepError(RuntimeError):
    def __init__(self, message: str, report: "SweepReport"):
        super().__init__(message)
        self.report = report


def grid_values(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, rounded to 12 decimals to keep 0.1 * 3 == 0.3."""
    if step <= 0:
        raise ValueError("grid step must be > 0")
    if stop < start:
        raise ValueError("grid stop must be >= start")
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 12) for i in range(n)]


@dataclass
class SweepConfig:
    kind: str
    grid: list[float]
    scopes: list[str] = field(default_factory=lambda: ["entire"])
    repeats: int = 100
    master_seed: int = 0
    fdr_target: float = DEFAULT_FDR
    model_path: str | None = None
    data_path: str | None = None
    data_split: str = "test"
    data_seed: int = DEFAULT_SEED
    n_test: int = 4000
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        if self.kind not in perturb.KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.grid = [float(g) for g in self.grid]

    @property
    def deterministic(self) -> bool:
        return self.kind in ("zero_lowmag", "scale")

    @property
    def effective_repeats(self) -> int:
        return 1 if self.deterministic else self.repeats

    def expected_rows(self) -> int:
        return len(self.grid) * len(self.scopes) * self.effective_repeats

    @classmethod
    def from_json(cls, d: dict) -> "SweepConfig":
        jsonschema.validate(d, SWEEP_CONFIG_SCHEMA)
        d = dict(d)
        grid = d.pop("grid")
        if isinstance(grid, dict):
            grid = grid_values(grid["start"], grid["stop"], grid["step"])
        return cls(grid=grid, **d)

    @classmethod
    def load(cls, path) -> "SweepConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrialRow:
    scope: str
    kind: str
    magnitude: float
    seed: int
    tdr: float
    fdr_achieved: float
    sensitivity: float
    wall_ms: int | None = None
    repeat: int = 0
    error: str | None = None

    def csv_fields(self) -> list[str]:
        head = [self.scope, self.kind, repr(self.magnitude), str(self.seed)]
        if self.error is not None:
            return head + ["error", "", "", ""]
        wall = "" if self.wall_ms is None else str(self.wall_ms)
        return head + [repr(self.tdr), repr(self.fdr_achieved), repr(self.sensitivity), wall]


@dataclass
class SweepReport:
    config: SweepConfig
    original: EvalResult
    rows: list[TrialRow]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def write(self, path) -> None:
        """CSV at ``path`` plus a ``.summary.json`` sidecar."""
        path = Path(path)
        path.write_text(self.csv_text())
        summary = {"original_tdr": self.original.tdr, "points": summarize(self.rows)}
        path.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    def point_rows(self, scope: str, magnitude: float) -> list[TrialRow]:
        return [r for r in self.rows if r.scope == scope and r.magnitude == magnitude and r.error is None]


def summarize(rows) -> list[dict]:
    """Per (scope, magnitude): n, mean/std (population)/min/max of TDR, mean sensitivity."""
    groups: dict[tuple[str, str, float], list] = {}
    for r in rows:
        if r.error is not None:
            continue
        groups.setdefault((r.scope, r.kind, r.magnitude), []).append(r)
    out = []
    for (scope, kind, mag), rs in groups.items():
        tdrs = [r.tdr for r in rs]
        out.append({
            "scope": scope, "kind": kind, "magnitude": mag, "n": len(rs),
            "mean_tdr": statistics.fmean(tdrs), "std_tdr": statistics.pstdev(tdrs),
            "min_tdr": min(tdrs), "max_tdr": max(tdrs),
            "mean_sensitivity": statistics.fmean(r.sensitivity for r in rs),
        })
    return out


def read_rows(path) -> list[TrialRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            if d["tdr"] == "error":
                rows.append(TrialRow(d["scope"], d["kind"], float(d["magnitude"]), int(d["seed"]),
                                     float("nan"), float("nan"), float("nan"), error="error"))
                continue
            rows.append(TrialRow(d["scope"], d["kind"], float(d["magnitude"]), int(d["seed"]),
                                 float(d["tdr"]), float(d["fdr_achieved"]), float(d["sensitivity"]),
                                 int(d["wall_ms"]) if d["wall_ms"] else None))
    return rows


def trial_seed(master_seed: int, point: int, repeat: int) -> int:
    return derive_seed(master_seed, point, repeat)


def run_trial(model: Model, test, spec: PerturbationSpec, original_tdr: float, fdr_target: float,
              repeat: int = 0, timing: bool = False) -> TrialRow:
    t0 = time.perf_counter()
    res = tdr_at_fdr(score_dataset(perturb.apply(model, spec), test), fdr_target)
    wall = int(round((time.perf_counter() - t0) * 1000)) if timing else None
    return TrialRow(spec.scope, spec.kind, spec.magnitude, spec.seed, res.tdr, res.fdr_achieved,
                    sensitivity(original_tdr, res.tdr), wall, repeat)


def _load_inputs(cfg: SweepConfig):
    if cfg.model_path is None:
        raise ValueError("sweep config has no model_path")
    model = checkpoint.load(cfg.model_path)
    if cfg.data_path:
        test = load_dataset(cfg.data_path, cfg.data_split)
    else:
        test = gen_split(cfg.n_test, cfg.data_seed, "test")
    return model, test


def run_sweep(cfg: SweepConfig, model: Model | None = None, test=None, out=None) -> SweepReport:
    """Run every (scope, grid point, repeat) trial of ``cfg``.

    On a failing trial the rows finished so far plus one error row are
    written to ``out`` (when given) and :class:`SweepError` is raised.
    """
    if model is None or test is None:
        model, test = _load_inputs(cfg)
    for scope in cfg.scopes:
        perturb._layers_in_scope(model, scope)  # fail fast on unknown names
    original = tdr_at_fdr(score_dataset(model, test), cfg.fdr_target)

    jobs = []
    for si, scope in enumerate(cfg.scopes):
        for pi, mag in enumerate(cfg.grid):
            for r in range(cfg.effective_repeats):
                seed = trial_seed(cfg.master_seed, pi, r)
                jobs.append(((si, pi, r), PerturbationSpec(cfg.kind, mag, scope, seed)))

    def work(job):
        (_, _, r), spec = job
        return run_trial(model, test, spec, original.tdr, cfg.fdr_target, r, cfg.timing)

    done: dict[tuple[int, int, int], TrialRow] = {}
    failure = None
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [(key, spec, pool.submit(work, (key, spec))) for key, spec in jobs]
            for key, spec, fut in futures:
                try:
                    done[key] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported as an error row
                    failure = failure or (key, spec, exc)
    else:
        for key, spec in jobs:
            try:
                done[key] = work((key, spec))
            except Exception as exc:  # noqa: BLE001
                failure = (key, spec, exc)
                break

    rows = [done[k] for k in sorted(done)]
    if failure is not None:
        key, spec, exc = failure
        rows.append(TrialRow(spec.scope, spec.kind, spec.magnitude, spec.seed, float("nan"),
                             float("nan"), float("nan"), repeat=key[2], error=f"{type(exc).__name__}: {exc}"))
    report = SweepReport(cfg, original, rows)
    if out is not None:
        report.write(out)
    if failure is not None:
        raise SweepError(f"trial {failure[0]} failed: {failure[2]}", report) from failure[2]
    return report


def select_consistent(rows, original_tdr: float) -> int:
    """Seed of the most consistent trial at one grid point.

    Qualifying trials are those with ``tdr >= original_tdr`` (all trials if
    none qualify).  The pick is the qualifying trial closest to the median
    TDR of the qualifying set; ties go to the lowest seed.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no trials to select from")
    pool = [r for r in rows if r.tdr >= original_tdr] or rows
    med = statistics.median(r.tdr for r in pool)
    best = min(pool, key=lambda r: (abs(r.tdr - med), r.seed))
    return best.seed
