"""Small named-layer CNN: forward scoring, SGD-momentum training, gradient check."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .params import ParamStore
from .tensor import Rng, col2im, conv2d, global_avg_pool, im2col, relu, softmax

log = logging.getLogger(__name__)

KINDS = ("conv", "dense", "relu", "gap", "softmax")
PARAM_KINDS = ("conv", "dense")

# Rows per forward chunk; bounds the im2col buffer to ~75 MB.
SCORE_CHUNK = 256


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: int = 0
    cin: int = 0
    cout: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            return {"weights": (self.kernel, self.kernel, self.cin, self.cout), "bias": (self.cout,)}
        if self.kind == "dense":
            return {"weights": (self.cin, self.cout), "bias": (self.cout,)}
        return {}

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.kind == "conv":
            d.update(kernel=self.kernel, cin=self.cin, cout=self.cout)
        elif self.kind == "dense":
            d.update(cin=self.cin, cout=self.cout)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(d["name"], d["kind"], int(d.get("kernel", 0)), int(d.get("cin", 0)), int(d.get("cout", 0)))


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (16, 16, 1)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        names = [l.name for l in self.layers]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate layer names: {sorted(dupes)}")
        h, w, c = self.input_shape
        spatial = True
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise ValueError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.kind == "conv":
                if not spatial or layer.cin != c:
                    raise ValueError(f"layer {layer.name!r}: expects {layer.cin} input channels, got {c}")
                if layer.kernel % 2 != 1:
                    raise ValueError(f"layer {layer.name!r}: kernel must be odd for same padding")
                c = layer.cout
            elif layer.kind == "gap":
                if not spatial:
                    raise ValueError(f"layer {layer.name!r}: gap needs a spatial input")
                spatial = False
            elif layer.kind == "dense":
                if spatial or layer.cin != c:
                    raise ValueError(f"layer {layer.name!r}: expects {layer.cin} features, got {c}")
                c = layer.cout
            elif layer.kind == "softmax" and spatial:
                raise ValueError(f"layer {layer.name!r}: softmax needs a flat input")

    @property
    def param_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.has_params]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(tuple(LayerSpec.from_dict(l) for l in d["layers"]), tuple(d["input_shape"]))


def default_spec() -> ModelSpec:
    """conv1..conv4 (3x3, 1->8->16->16->8) with ReLUs, GAP, dense 8->2, softmax."""
    layers = []
    chans = [1, 8, 16, 16, 8]
    for i in range(4):
        layers.append(LayerSpec(f"conv{i + 1}", "conv", 3, chans[i], chans[i + 1]))
        layers.append(LayerSpec(f"relu{i + 1}", "relu"))
    layers += [LayerSpec("gap", "gap"), LayerSpec("dense", "dense", 0, 8, 2), LayerSpec("softmax", "softmax")]
    return ModelSpec(tuple(layers), (16, 16, 1))


@dataclass
class Model:
    spec: ModelSpec
    params: ParamStore
    history: list[dict[str, float]] = field(default_factory=list, compare=False, repr=False)

    def copy(self) -> "Model":
        return Model(self.spec, self.params.clone())


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 20
    epochs: int = 50
    seed: int = 0
    # Stop once running train accuracy is 1.0 for this many epochs; 0 disables.
    early_stop_epochs: int = 3

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def init_model(spec: ModelSpec, seed: int) -> Model:
    """He-uniform weights, zero biases; layer ``i`` draws from stream (seed, 0, i)."""
    rng = Rng(seed)
    params = ParamStore()
    for i, layer in enumerate(spec.layers):
        if not layer.has_params:
            continue
        shapes = layer.param_shapes()
        wshape = shapes["weights"]
        fan_in = int(np.prod(wshape[:-1]))
        limit = math.sqrt(6.0 / fan_in)
        u = rng.spawn(0, i).uniform(int(np.prod(wshape)))
        params[layer.name, "weights"] = ((2.0 * u - 1.0) * limit).reshape(wshape)
        params[layer.name, "bias"] = np.zeros(shapes["bias"], dtype=np.float32)
    return Model(spec, params)


def zero_model(spec: ModelSpec) -> Model:
    params = ParamStore()
    for layer in spec.layers:
        for role, shape in layer.param_shapes().items():
            params[layer.name, role] = np.zeros(shape, dtype=np.float32)
    return Model(spec, params)


def _check_input(spec: ModelSpec, batch: np.ndarray) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {tuple(batch.shape)} does not match model input [n, {', '.join(map(str, spec.input_shape))}]")


def _run(spec: ModelSpec, params, x: np.ndarray, keep: bool):
    """Forward pass in x's dtype.  Returns (probs, logits, caches)."""
    caches = []
    logits = None
    for layer in spec.layers:
        if layer.kind == "conv":
            w = params[layer.name, "weights"].astype(x.dtype)
            b = params[layer.name, "bias"].astype(x.dtype)
            if keep:
                cols = im2col(x, layer.kernel)
                caches.append((x.shape, cols))
                out = cols @ w.reshape(-1, layer.cout) + b
                x = out.reshape(x.shape[:3] + (layer.cout,))
            else:
                x = conv2d(x, w, b)
        elif layer.kind == "dense":
            w = params[layer.name, "weights"].astype(x.dtype)
            b = params[layer.name, "bias"].astype(x.dtype)
            if keep:
                caches.append(x)
            x = (x.astype(np.float64) @ w.astype(np.float64) + b).astype(x.dtype)
        elif layer.kind == "relu":
            if keep:
                caches.append(x > 0)
            x = relu(x)
        elif layer.kind == "gap":
            if keep:
                caches.append(x.shape)
            x = global_avg_pool(x)
        elif layer.kind == "softmax":
            logits = x
            x = softmax(x)
            caches.append(None)
    return x, logits, caches


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities [n, classes] for a [n, h, w, c] batch."""
    batch = np.asarray(batch, dtype=np.float32)
    _check_input(model.spec, batch)
    if len(batch) <= SCORE_CHUNK:
        return _run(model.spec, model.params, batch, keep=False)[0]
    parts = [_run(model.spec, model.params, batch[i:i + SCORE_CHUNK], keep=False)[0]
             for i in range(0, len(batch), SCORE_CHUNK)]
    return np.concatenate(parts)


def pa_scores(model: Model, batch: np.ndarray) -> np.ndarray:
    """Positive-class (attack) probability per sample."""
    return forward(model, batch)[:, 1]


def _loss_and_grads(spec: ModelSpec, params, x: np.ndarray, labels: np.ndarray, want_grads: bool = True):
    """Mean cross-entropy and its gradient w.r.t. every parameter, in x's dtype."""
    probs, logits, caches = _run(spec, params, x, keep=want_grads)
    n = len(labels)
    logits = logits.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    if not want_grads:
        return loss, probs, None

    grads: dict[tuple[str, str], np.ndarray] = {}
    g = probs.astype(np.float64)
    g[np.arange(n), labels] -= 1.0
    g = (g / n).astype(x.dtype)
    for layer, cache in zip(reversed(spec.layers), reversed(caches)):
        if layer.kind == "softmax":
            continue
        if layer.kind == "dense":
            xin = cache
            w = params[layer.name, "weights"].astype(g.dtype)
            grads[layer.name, "weights"] = xin.T @ g
            grads[layer.name, "bias"] = g.sum(axis=0)
            g = g @ w.T
        elif layer.kind == "gap":
            nb, h, wd, c = cache
            g = np.broadcast_to(g[:, None, None, :] / (h * wd), cache).copy()
        elif layer.kind == "relu":
            g = g * cache
        elif layer.kind == "conv":
            in_shape, cols = cache
            w = params[layer.name, "weights"].astype(g.dtype)
            g2 = g.reshape(-1, layer.cout)
            grads[layer.name, "weights"] = (cols.T @ g2).reshape(w.shape)
            grads[layer.name, "bias"] = g2.sum(axis=0)
            if layer is not spec.layers[0]:
                g = col2im(g2 @ w.reshape(-1, layer.cout).T, in_shape, layer.kernel)
    return loss, probs, grads


def _check_dataset(data) -> None:
    labels = np.asarray(data.labels)
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        raise ValueError("degenerate dataset")


def train(spec: ModelSpec, data, cfg: TrainConfig | None = None) -> Model:
    """Minibatch SGD with momentum on mean cross-entropy.

    Update: ``v = momentum * v + grad; w -= lr * v``.  Activations and
    gradients are float32; the master parameters and velocities are float64
    and are rounded to float32 at the end.  Per-epoch loss and running
    accuracy are kept on ``model.history``.
    """
    cfg = cfg or TrainConfig()
    _check_dataset(data)
    images = np.asarray(data.images, dtype=np.float32)
    _check_input(spec, images)
    labels = np.asarray(data.labels, dtype=np.int64)

    model = init_model(spec, cfg.seed)
    if cfg.epochs == 0:
        return model
    work = {k: v.astype(np.float64) for k, v in model.params.items()}
    vel = {k: np.zeros_like(v) for k, v in work.items()}
    rng = Rng(cfg.seed)
    n = len(labels)
    perfect = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.spawn(1, epoch).permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, probs, grads = _loss_and_grads(spec, work, images[idx], labels[idx])
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
            for k, gk in grads.items():
                vel[k] *= cfg.momentum
                vel[k] += gk
                work[k] -= cfg.learning_rate * vel[k]
        epoch_loss = total_loss / n
        acc = correct / n
        if not math.isfinite(epoch_loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        history.append({"epoch": epoch, "loss": epoch_loss, "accuracy": acc})
        log.debug("epoch %d loss %.5f acc %.4f", epoch, epoch_loss, acc)
        perfect = perfect + 1 if acc == 1.0 else 0
        if cfg.early_stop_epochs and perfect >= cfg.early_stop_epochs:
            break
    params = ParamStore()
    for k, v in work.items():
        params[k] = v
    return Model(spec, params, history)


def loss(model: Model, batch: np.ndarray, labels) -> float:
    batch = np.asarray(batch, dtype=np.float64)
    return _loss_and_grads(model.spec, model.params, batch, np.asarray(labels, dtype=np.int64), False)[0]


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def _loss_and_masks(spec: ModelSpec, params, x: np.ndarray, labels: np.ndarray):
    probs, logits, caches = _run(spec, params, x, keep=True)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    masks = [c for c in caches if isinstance(c, np.ndarray) and c.dtype == bool]
    return float(-logp[np.arange(len(labels)), labels].mean()), masks


def grad_check(model: Model, batch: np.ndarray, labels, n_params: int = 128, step: float = 1e-3,
               seed: int = 0, details: bool = False):
    """Max relative error between backprop and central finite differences.

    Runs in float64.  Parameters are visited in a seeded random order until
    ``n_params`` have been checked.  A parameter whose +/- step flips any
    ReLU on the batch is skipped: the loss is not differentiable across that
    kink, so the difference quotient there says nothing about the backward
    pass.  Where both gradients are below 1e-6 in magnitude the absolute
    error is used, so dead-ReLU parameters do not divide by zero.
    """
    spec = model.spec
    work = {k: v.astype(np.float64) for k, v in model.params.items()}
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, _, grads = _loss_and_grads(spec, work, batch, labels)
    _, base_masks = _loss_and_masks(spec, work, batch, labels)

    keys = list(work)
    sizes = np.array([work[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = Rng(seed).permutation(int(offsets[-1]))

    worst = 0.0
    checked = skipped = 0
    for flat in order.tolist():
        if checked >= n_params:
            break
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        key, j = keys[t], flat - int(offsets[t])
        arr = work[key].reshape(-1)
        orig = arr[j]
        arr[j] = orig + step
        up, up_masks = _loss_and_masks(spec, work, batch, labels)
        arr[j] = orig - step
        down, down_masks = _loss_and_masks(spec, work, batch, labels)
        arr[j] = orig
        if any(not (np.array_equal(a, b) and np.array_equal(a, c))
               for a, b, c in zip(base_masks, up_masks, down_masks)):
            skipped += 1
            continue
        numeric = (up - down) / (2 * step)
        analytic = float(grads[key].reshape(-1)[j])
        scale = max(abs(numeric), abs(analytic))
        err = abs(numeric - analytic)
        worst = max(worst, err / scale if scale >= 1e-6 else err)
        checked += 1
    if checked < n_params:
        log.warning("grad_check: only %d of %d parameters are kink-free", checked, n_params)
    if details:
        return GradCheck(worst, checked, skipped)
    return worst
