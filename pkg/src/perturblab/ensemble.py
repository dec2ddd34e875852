"""Training-free fusion of perturbed models: score-level and parameter-level."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import perturb
from .evaluate import ScoreSet
from .network import Model
from .params import ParamStore
from .perturb import PerturbationSpec

# Named component presets.  The Gaussian component is shipped under both
# readings of its strength: alpha = 0.1 and the 0.3 sigma multiplier.
PRESETS: dict[str, PerturbationSpec] = {
    "lowmag_conv3_92": PerturbationSpec("zero_lowmag", 0.92, "conv3"),
    "gauss_a0.1": PerturbationSpec("gaussian", 0.1, "entire"),
    "gauss_a0.3": PerturbationSpec("gaussian", 0.3, "entire"),
}
DEFAULT_COMPONENTS = ("lowmag_conv3_92", "gauss_a0.1")
MODES = ("score_level", "parameter_level")


@dataclass
class EnsembleSpec:
    mode: str
    components: list[PerturbationSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.components) < 2:
            raise ValueError("an ensemble needs at least 2 components")

    @classmethod
    def default(cls, mode: str, seed: int = 0) -> "EnsembleSpec":
        return cls(mode, [with_seed(PRESETS[name], seed) for name in DEFAULT_COMPONENTS])

    def to_json(self) -> dict:
        return {"mode": self.mode, "components": [c.to_json() for c in self.components]}

    @classmethod
    def from_json(cls, d: dict) -> "EnsembleSpec":
        comps = []
        for c in d["components"]:
            comps.append(PRESETS[c] if isinstance(c, str) else PerturbationSpec.from_json(c))
        return cls(d["mode"], comps)


def with_seed(spec: PerturbationSpec, seed: int) -> PerturbationSpec:
    return PerturbationSpec(spec.kind, spec.magnitude, spec.scope, seed)


def fuse_scores(sets: list[ScoreSet]) -> ScoreSet:
    """Sum rule, normalised to the mean so fused scores stay in [0, 1]."""
    if len(sets) < 1:
        raise ValueError("nothing to fuse")
    first = sets[0]
    for i, s in enumerate(sets[1:], 1):
        if len(s) != len(first):
            raise ValueError(f"score set {i} has {len(s)} samples, expected {len(first)}")
        if not np.array_equal(s.labels, first.labels):
            raise ValueError(f"score set {i} labels differ from score set 0")
    total = first.scores.copy()
    for s in sets[1:]:
        total += s.scores
    fused = total / len(sets)
    prov = {"fused": [s.provenance for s in sets]}
    return ScoreSet(first.labels.copy(), fused, prov)


def fuse_params(models: list[Model]) -> Model:
    """Elementwise mean of every parameter tensor (weights and bias)."""
    if len(models) < 1:
        raise ValueError("nothing to fuse")
    base = models[0]
    for m in models[1:]:
        for a, b in zip(base.spec.layers, m.spec.layers):
            if a != b:
                raise ValueError(f"model specs diverge at layer {a.name!r} ({a} vs {b})")
        if len(base.spec.layers) != len(m.spec.layers):
            raise ValueError("model specs have different layer counts")
        if list(base.params.keys()) != list(m.params.keys()):
            raise ValueError("parameter stores hold different entries")
    out = ParamStore()
    for key, t in base.params.items():
        acc = t.astype(np.float64)
        for m in models[1:]:
            other = m.params[key]
            if other.shape != t.shape:
                raise ValueError(f"{key[0]}/{key[1]}: shape {other.shape} != {t.shape}")
            acc = acc + other
        out[key] = acc / len(models)
    return Model(base.spec, out)


def build_components(model: Model, spec: EnsembleSpec) -> list[Model]:
    return [perturb.apply(model, c) for c in spec.components]
