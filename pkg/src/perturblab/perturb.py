"""Weight perturbation operators.

Every operator returns a new :class:`Model` and leaves its input untouched.
Scope is either ``"entire"`` (all parameterized layers, each handled on its
own) or a single parameterized layer name.

Which tensors each operator touches:

* gaussian, scale: weights and bias
* zero_random, zero_lowmag: weights only

Random draws for layer ``i`` (its index in the model's layer list) come from the
stream ``(seed, i)``, so perturbing one layer alone reproduces exactly the
noise that layer receives in an entire-network run with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import Model
from .tensor import Rng, sample_gaussian, tensor_std

KINDS = ("gaussian", "zero_random", "zero_lowmag", "scale")
ENTIRE = "entire"


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float
    scope: str = ENTIRE
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        m = float(self.magnitude)
        if not math.isfinite(m):
            raise ValueError("magnitude must be finite")
        if self.kind == "gaussian" and m < 0:
            raise ValueError(f"gaussian alpha must be >= 0, got {m}")
        if self.kind in ("zero_random", "zero_lowmag") and not 0 <= m <= 1:
            raise ValueError(f"zeroing beta must be in [0, 1], got {m}")
        object.__setattr__(self, "magnitude", m)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def deterministic(self) -> bool:
        return self.kind in ("zero_lowmag", "scale")

    def to_json(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "scope": self.scope, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "PerturbationSpec":
        unknown = set(d) - {"kind", "magnitude", "scope", "seed"}
        if unknown:
            raise ValueError(f"unknown perturbation fields: {sorted(unknown)}")
        return cls(d["kind"], d["magnitude"], d.get("scope", ENTIRE), d.get("seed", 0))


def _layers_in_scope(model: Model, scope: str) -> list[tuple[int, str]]:
    indexed = [(i, l.name) for i, l in enumerate(model.spec.layers) if l.has_params]
    if scope == ENTIRE:
        return indexed
    for i, name in indexed:
        if name == scope:
            return [(i, name)]
    valid = [ENTIRE] + [n for _, n in indexed]
    raise ValueError(f"unknown layer {scope!r}; valid scopes: {', '.join(valid)}")


def zero_count(beta: float, n: int) -> int:
    """floor(beta * n), nudged so decimal betas like 0.29 * 100 give 29."""
    return min(n, int(math.floor(beta * n + 1e-9)))


def perturb_gaussian(model: Model, alpha: float, scope: str = ENTIRE, seed: int = 0) -> Model:
    """Add N(0, alpha * sigma_layer) to weights and bias of in-scope layers.

    sigma_layer is the population std of the layer's weights and bias
    flattened together; noise is drawn over that same concatenation.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    layers = _layers_in_scope(model, scope)
    out = model.copy()
    if alpha == 0:
        return out
    for i, name in layers:
        w = out.params[name, "weights"]
        b = out.params[name, "bias"]
        flat = np.concatenate([w.ravel(), b.ravel()])
        noise = sample_gaussian(Rng(seed).spawn(i), flat.size, 0.0, alpha * tensor_std(flat))
        mod = (flat.astype(np.float64) + noise).astype(np.float32)
        out.params[name, "weights"] = mod[:w.size].reshape(w.shape)
        out.params[name, "bias"] = mod[w.size:].reshape(b.shape)
    return out


def perturb_zero_random(model: Model, beta: float, scope: str = ENTIRE, seed: int = 0) -> Model:
    """Zero floor(beta * n) weights per in-scope layer, chosen uniformly without replacement."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    out = model.copy()
    for i, name in _layers_in_scope(model, scope):
        w = out.params[name, "weights"]
        k = zero_count(beta, w.size)
        if k == 0:
            continue
        flat = w.ravel().copy()
        flat[Rng(seed).spawn(i).permutation(flat.size)[:k]] = 0.0
        out.params[name, "weights"] = flat.reshape(w.shape)
    return out


def lowmag_order(w: np.ndarray) -> np.ndarray:
    """Flat indices by ascending |w|, ties resolved by lower index first."""
    return np.argsort(np.abs(w.ravel()), kind="stable")


def perturb_zero_lowmag(model: Model, beta: float, scope: str = ENTIRE) -> Model:
    """Zero the floor(beta * n) smallest-magnitude weights of each in-scope layer."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    out = model.copy()
    for _, name in _layers_in_scope(model, scope):
        w = out.params[name, "weights"]
        k = zero_count(beta, w.size)
        if k == 0:
            continue
        flat = w.ravel().copy()
        flat[lowmag_order(flat)[:k]] = 0.0
        out.params[name, "weights"] = flat.reshape(w.shape)
    return out


def perturb_scale(model: Model, gamma: float, scope: str = ENTIRE) -> Model:
    """Multiply weights and bias of in-scope layers by gamma."""
    if not math.isfinite(gamma):
        raise ValueError("gamma must be finite")
    layers = _layers_in_scope(model, scope)
    out = model.copy()
    if gamma == 1:
        return out
    for _, name in layers:
        for role in ("weights", "bias"):
            t = out.params[name, role]
            out.params[name, role] = (t.astype(np.float64) * gamma).astype(np.float32)
    return out


def apply(model: Model, spec: PerturbationSpec) -> Model:
    if spec.kind == "gaussian":
        return perturb_gaussian(model, spec.magnitude, spec.scope, spec.seed)
    if spec.kind == "zero_random":
        return perturb_zero_random(model, spec.magnitude, spec.scope, spec.seed)
    if spec.kind == "zero_lowmag":
        return perturb_zero_lowmag(model, spec.magnitude, spec.scope)
    return perturb_scale(model, spec.magnitude, spec.scope)
