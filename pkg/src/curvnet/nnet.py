"""Fully connected regression network in plain numpy.

Hidden layers use ReLU and the output neuron is linear.  All parameters of a
model live in one contiguous float64 buffer; the per-layer weight and bias
arrays are views into it, which keeps the Adam update a handful of vector
operations.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Normalization, SampleSet, SplitSet

log = logging.getLogger(__name__)

FORMAT_NAME = "curvnet-mlp"
FORMAT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or parameter becomes non-finite during training."""


class ModelFileError(ValueError):
    pass


def _layout(layer_sizes: Sequence[int]):
    """Offsets of (W, b) for every layer inside the flat buffer."""
    spans, off = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = (off, off + n_in * n_out)
        off = w[1]
        b = (off, off + n_out)
        off = b[1]
        spans.append((w, b))
    return spans, off


class MlpModel:
    """ReLU network with a linear scalar output.

    ``weights[m]`` has shape ``(n_in, n_out)`` so a layer maps ``a -> a @ W + b``.
    """

    def __init__(self, layer_sizes: Sequence[int], params: Optional[np.ndarray] = None,
                 normalization: Optional[Normalization] = None, rho_tag: Optional[int] = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        if sizes[-1] != 1:
            raise ValueError("output layer must have exactly one neuron")
        self.layer_sizes = tuple(sizes)
        spans, total = _layout(sizes)
        self._spans = spans
        if params is None:
            params = np.zeros(total)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (total,):
            raise ValueError(f"expected {total} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params
        self.normalization = normalization or Normalization.identity(sizes[0])
        if len(self.normalization.mean) != sizes[0]:
            raise ValueError("normalization width does not match the input layer")
        self.rho_tag = rho_tag

    @property
    def n_params(self) -> int:
        return self.params.size

    def views(self, buf: np.ndarray):
        """Split a flat buffer shaped like ``params`` into [(W, b), ...]."""
        out = []
        for (w0, w1), (b0, b1), n_in, n_out in zip(
                [s[0] for s in self._spans], [s[1] for s in self._spans],
                self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append((buf[w0:w1].reshape(n_in, n_out), buf[b0:b1]))
        return out

    @property
    def weights(self) -> list[np.ndarray]:
        return [w for w, _ in self.views(self.params)]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for _, b in self.views(self.params)]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_sizes, self.params.copy(), self.normalization, self.rho_tag)


def init_model(layer_sizes: Sequence[int], rng: np.random.Generator,
               normalization: Optional[Normalization] = None, rho_tag=None) -> MlpModel:
    """He-uniform weights (fan-in), zero biases."""
    model = MlpModel(layer_sizes, normalization=normalization, rho_tag=rho_tag)
    for w, _ in model.views(model.params):
        limit = math.sqrt(6.0 / w.shape[0])
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return model


def _forward_raw(model: MlpModel, x: np.ndarray, keep: bool = False):
    layers = model.views(model.params)
    acts = [x]
    a = x
    for m, (w, b) in enumerate(layers):
        z = a @ w
        z += b
        if m < len(layers) - 1:
            np.maximum(z, 0.0, out=z)
        a = z
        if keep:
            acts.append(a)
    return (a[:, 0], acts) if keep else a[:, 0]


def forward(model: MlpModel, stencil) -> float | np.ndarray:
    """Network estimate of h*kappa.

    Accepts one stencil (9 values, returns a float) or a batch ``(n, 9)``.
    Inputs are standardized with the model's stored statistics.
    """
    s = np.asarray(stencil, dtype=float)
    single = s.ndim == 1
    x = model.normalization.apply(np.atleast_2d(s))
    y = _forward_raw(model, x)
    return float(y[0]) if single else y


def predict(model: MlpModel, stencils: np.ndarray, chunk: int = 65536) -> np.ndarray:
    stencils = np.asarray(stencils, dtype=float).reshape(-1, model.layer_sizes[0])
    out = np.empty(len(stencils))
    for k in range(0, len(stencils), chunk):
        out[k:k + chunk] = forward(model, stencils[k:k + chunk])
    return out


def backward(model: MlpModel, x: np.ndarray, y: np.ndarray,
             grad: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Batch-mean squared error and its gradient w.r.t. ``model.params``.

    ``x`` must already be standardized.  The ReLU derivative at 0 is taken
    as 0.  Returns ``(loss, grad)`` where ``grad`` is a flat buffer.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    pred, acts = _forward_raw(model, x, keep=True)
    resid = pred - y
    loss = float(resid @ resid) / n
    if grad is None:
        grad = np.empty_like(model.params)
    gviews = model.views(grad)
    layers = model.views(model.params)
    delta = (2.0 / n) * resid[:, None]
    for m in range(len(layers) - 1, -1, -1):
        gw, gb = gviews[m]
        np.matmul(acts[m].T, delta, out=gw)
        np.sum(delta, axis=0, out=gb)
        if m:
            delta = delta @ layers[m][0].T
            delta *= acts[m] > 0
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, config: TrainConfig,
              _scratch: Optional[np.ndarray] = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    b1, b2 = config.beta1, config.beta2
    buf = np.empty_like(params) if _scratch is None else _scratch
    state.t += 1
    # m <- b1 m + (1 - b1) g and v <- b2 v + (1 - b2) g^2, written in place
    np.subtract(grad, state.m, out=buf)
    buf *= 1 - b1
    state.m += buf
    np.multiply(grad, grad, out=buf)
    buf -= state.v
    buf *= 1 - b2
    state.v += buf
    step = config.learning_rate * math.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t)
    eps_hat = config.eps * math.sqrt(1 - b2 ** state.t)
    np.sqrt(state.v, out=buf)
    buf += eps_hat
    np.divide(state.m, buf, out=buf)
    buf *= step
    params -= buf
    return state


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_mae(self) -> float:
        return self.val_mae[self.best_epoch]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_mse,val_mae,best\n")
            for k, (tl, vm) in enumerate(zip(self.train_loss, self.val_mae)):
                fh.write(f"{k},{tl:.17g},{vm:.17g},{int(k == self.best_epoch)}\n")


def mae(model: MlpModel, samples: SampleSet) -> float:
    return float(np.mean(np.abs(predict(model, samples.stencils) - samples.targets)))


def train(data: SplitSet, layer_sizes: Sequence[int], config: TrainConfig = TrainConfig(),
          normalization: Optional[Normalization] = None, rho_tag=None,
          progress=None) -> tuple[MlpModel, TrainLog]:
    """Mini-batch Adam on the MSE with early stopping on validation MAE.

    Normalization is fitted on the training split unless given.  Returns the
    parameters of the best validation epoch.
    """
    from .dataset import fit_normalization

    sizes = list(layer_sizes)
    if sizes[0] != 9 or sizes[-1] != 1:
        raise ValueError("architecture must map 9 inputs to 1 output")
    if len(data.train) == 0 or len(data.validation) == 0:
        raise ValueError("training and validation splits must be non-empty")
    norm = normalization or fit_normalization(data.train)
    rng = np.random.default_rng(config.seed)
    model = init_model(sizes, rng, norm, rho_tag)
    x_train = norm.apply(data.train.stencils)
    y_train = data.train.targets
    state = AdamState.zeros(model.n_params)
    grad = np.empty_like(model.params)
    scratch = np.empty_like(model.params)
    best = model.params.copy()
    tlog = TrainLog()
    bs = config.batch_size
    n = len(y_train)
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
                loss, _ = backward(model, x_train[idx], y_train[idx], grad)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // bs}")
            total += loss * len(idx)
            adam_step(model.params, grad, state, config, scratch)
        if not np.all(np.isfinite(model.params)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        val = mae(model, data.validation)
        tlog.train_loss.append(total / n)
        tlog.val_mae.append(val)
        if tlog.best_epoch < 0 or val < tlog.val_mae[tlog.best_epoch]:
            tlog.best_epoch = epoch
            best[:] = model.params
        log.info("epoch %d train_mse %.4e val_mae %.4e", epoch, total / n, val)
        if progress is not None:
            progress(epoch, total / n, val)
        if epoch - tlog.best_epoch >= config.patience:
            break
    model.params[:] = best
    return model, tlog


# --------------------------------------------------------------------------
# model files


def _num_list(a) -> str:
    return "[" + ",".join("%.17g" % v for v in np.ravel(a)) + "]"


def save_model(model: MlpModel, path, config: Optional[TrainConfig] = None) -> None:
    """Versioned JSON; every float is written with 17 significant digits."""
    parts = [
        f'"format": "{FORMAT_NAME}"',
        f'"version": {FORMAT_VERSION}',
        f'"layer_sizes": {json.dumps(list(model.layer_sizes))}',
        f'"rho_tag": {json.dumps(model.rho_tag)}',
        f'"normalization": {{"mean": {_num_list(model.normalization.mean)}, '
        f'"std": {_num_list(model.normalization.std)}}}',
        f'"train_config": {json.dumps(asdict(config) if config else None)}',
    ]
    layers = [f'{{"W": {_num_list(w)}, "b": {_num_list(b)}}}' for w, b in model.views(model.params)]
    parts.append('"layers": [\n' + ",\n".join(layers) + "\n]")
    Path(path).write_text("{\n" + ",\n".join(parts) + "\n}\n")


def load_model(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFileError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        sizes = [int(s) for s in doc["layer_sizes"]]
        layers = doc["layers"]
        if len(layers) != len(sizes) - 1:
            raise ModelFileError(f"{path}: {len(layers)} layers for sizes {sizes}")
        chunks = []
        for k, (layer, n_in, n_out) in enumerate(zip(layers, sizes[:-1], sizes[1:])):
            w = np.asarray(layer["W"], dtype=float)
            b = np.asarray(layer["b"], dtype=float)
            if w.shape != (n_in * n_out,) or b.shape != (n_out,):
                raise ModelFileError(f"{path}: layer {k} shape does not match layer_sizes")
            chunks += [w, b]
        params = np.concatenate(chunks)
        norm_doc = doc["normalization"]
        norm = Normalization(np.asarray(norm_doc["mean"], dtype=float),
                             np.asarray(norm_doc["std"], dtype=float))
        if not (np.all(np.isfinite(params)) and np.all(np.isfinite(norm.mean))
                and np.all(np.isfinite(norm.std))):
            raise ModelFileError(f"{path}: non-finite values")
        return MlpModel(sizes, params, norm, doc.get("rho_tag"))
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"{path}: malformed model file ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"{path}: invalid model ({exc})") from exc


def parse_arch(text: str) -> list[int]:
    """``"128x4"`` -> ``[9, 128, 128, 128, 128, 1]``; ``"64,32"`` lists widths."""
    text = text.strip().lower()
    try:
        if "x" in text:
            width, depth = text.split("x")
            hidden = [int(width)] * int(depth)
        else:
            hidden = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise ValueError(f"bad architecture {text!r}") from None
    if not hidden or any(h < 1 for h in hidden):
        raise ValueError(f"bad architecture {text!r}")
    return [9, *hidden, 1]
