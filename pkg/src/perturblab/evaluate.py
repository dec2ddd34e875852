"""Scoring, operating-point thresholds, TDR at a fixed FDR, and sensitivity.

Label 1 is the attack (positive) class.  A sample is called an attack when
its score is strictly greater than the threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import Model, pa_scores

DEFAULT_FDR = 0.2  # percent


@dataclass
class ScoreSet:
    labels: np.ndarray
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise ValueError(f"labels {self.labels.shape} and scores {self.scores.shape} must be equal-length vectors")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (bonafide) or 1 (pa)")
        if len(self.scores) and not ((self.scores >= 0) & (self.scores <= 1)).all():
            raise ValueError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bonafide(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    @property
    def pa(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    def to_csv(self, path) -> None:
        """``label,score`` rows plus a ``<path>.json`` provenance sidecar."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "score"])
            for lab, s in zip(self.labels.tolist(), self.scores.tolist()):
                w.writerow([lab, repr(s)])
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.provenance, sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ScoreSet":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        sidecar = path.with_name(path.name + ".json")
        prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls([int(r["label"]) for r in rows], [float(r["score"]) for r in rows], prov)


@dataclass(frozen=True)
class EvalResult:
    threshold: float
    tdr: float
    fdr_target: float
    fdr_achieved: float
    pa_total: int
    pa_detected: int
    bonafide_total: int
    bonafide_false: int

    def to_dict(self) -> dict:
        return asdict(self)


def score_dataset(model: Model, data, model_id: str = "", dataset_id: str = "") -> ScoreSet:
    if len(data.labels) == 0:
        raise ValueError("empty dataset")
    scores = pa_scores(model, data.images).astype(np.float64)
    return ScoreSet(data.labels, scores, {"model": model_id, "dataset": dataset_id})


def _check_target(fdr_target: float) -> None:
    if not 0 <= fdr_target <= 100:
        raise ValueError(f"fdr_target must be a percentage in [0, 100], got {fdr_target}")


def threshold_at_fdr(s: ScoreSet, fdr_target: float = DEFAULT_FDR) -> float:
    """Smallest T in (bonafide scores + {1.0}) with 100 * #(bonafide > T) / #bonafide <= target."""
    _check_target(fdr_target)
    bona = np.sort(s.bonafide)
    nb = len(bona)
    if nb == 0:
        raise ValueError("no bonafide samples")
    cands = np.unique(np.append(bona, 1.0))
    above = nb - np.searchsorted(bona, cands, side="right")
    ok = np.flatnonzero(100.0 * above / nb <= fdr_target)
    # cands[-1] >= 1.0 always satisfies, so ok is never empty
    return float(cands[ok[0]])


def tdr_at_fdr(s: ScoreSet, fdr_target: float = DEFAULT_FDR) -> EvalResult:
    pa = s.pa
    if len(pa) == 0:
        raise ValueError("no pa samples")
    t = threshold_at_fdr(s, fdr_target)
    bona = s.bonafide
    detected = int((pa > t).sum())
    false = int((bona > t).sum())
    fdr = 100.0 * false / len(bona)
    if fdr > fdr_target:
        raise AssertionError(f"threshold {t} gives FDR {fdr} above target {fdr_target}")
    return EvalResult(t, 100.0 * detected / len(pa), fdr_target, fdr,
                      len(pa), detected, len(bona), false)


def sensitivity(tdr_org: float, tdr_mod: float) -> float:
    """Absolute TDR change in percentage points."""
    for v in (tdr_org, tdr_mod):
        if not 0 <= v <= 100:
            raise ValueError(f"TDR must be in [0, 100], got {v}")
    return abs(tdr_org - tdr_mod)


def evaluate(model: Model, data, fdr_target: float = DEFAULT_FDR) -> EvalResult:
    return tdr_at_fdr(score_dataset(model, data), fdr_target)
