"""A small numpy neural-network engine with input gradients.

Layers run channels-last: a ``Conv1D`` sees ``(batch, length, channels)``.
Every backward pass returns the gradient with respect to the network input
as well as the parameter gradients, which is what the perturbation
generators consume.

Parameters are float32; calling :meth:`Model.astype` with float64 gives a
copy suitable for finite-difference checks.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ComputeError, DataError
from .features import Encoding, NormStats

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"ANTM"
MODEL_VERSION = 1


# ---------------------------------------------------------------- layer specs

@dataclass(frozen=True)
class Conv1D:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool1D:
    width: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Softmax:
    pass


_LAYER_TYPES = {cls.__name__: cls for cls in (Conv1D, ReLU, MaxPool1D, Flatten, Dense, Softmax)}


def _layer_to_dict(layer) -> dict:
    d = {"type": type(layer).__name__}
    d.update(layer.__dict__)
    return d


def _layer_from_dict(d: dict):
    d = dict(d)
    return _LAYER_TYPES[d.pop("type")](**d)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_length: int
    n_classes: int
    family: str = "CNN1D"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.family not in ("CNN1D", "SAE"):
            raise DataError(f"unknown architecture family {self.family}")
        if self.family == "SAE":
            bad = [l for l in self.layers if not isinstance(l, (Dense, ReLU, Softmax))]
            if bad:
                raise DataError(f"SAE family allows Dense/ReLU only, got {bad}")
        out = self.shapes()[-1]
        if out != (self.n_classes,):
            raise DataError(f"final layer yields shape {out}, expected ({self.n_classes},)")

    def shapes(self) -> list:
        """Per-layer output shapes, starting with the input shape."""
        first = self.layers[0] if self.layers else None
        shape = (self.input_length, 1) if isinstance(first, Conv1D) else (self.input_length,)
        shapes = [shape]
        for layer in self.layers:
            shape = _out_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        return {"layers": [_layer_to_dict(l) for l in self.layers],
                "input_length": self.input_length, "n_classes": self.n_classes,
                "family": self.family}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(_layer_from_dict(l) for l in d["layers"]), d["input_length"],
                   d["n_classes"], d["family"])


def _out_shape(layer, shape):
    if isinstance(layer, Conv1D):
        if len(shape) != 2:
            raise DataError(f"Conv1D needs (length, channels) input, got {shape}")
        lo = (shape[0] - layer.kernel) // layer.stride + 1
        if lo < 1:
            raise DataError(f"Conv1D kernel {layer.kernel} longer than input {shape[0]}")
        return (lo, layer.filters)
    if isinstance(layer, MaxPool1D):
        if len(shape) != 2 or shape[0] // layer.width < 1:
            raise DataError(f"MaxPool1D({layer.width}) cannot pool shape {shape}")
        return (shape[0] // layer.width, shape[1])
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise DataError(f"Dense needs flat input, got {shape}")
        return (layer.units,)
    return shape


def cnn_spec(input_length: int, n_classes: int) -> ModelSpec:
    """Reference desk-scale 1D-CNN."""
    return ModelSpec((Conv1D(16, 7, 3), ReLU(), MaxPool1D(2), Conv1D(32, 5, 1), ReLU(),
                      Flatten(), Dense(64), ReLU(), Dense(n_classes), Softmax()),
                     input_length, n_classes, "CNN1D")


def sae_spec(input_length: int, n_classes: int) -> ModelSpec:
    """Stacked fully-connected classifier trained end to end."""
    return ModelSpec((Dense(256), ReLU(), Dense(128), ReLU(), Dense(n_classes), Softmax()),
                     input_length, n_classes, "SAE")


# ------------------------------------------------------------ layer kernels

def _init_params(spec: ModelSpec, rng: np.random.Generator) -> list:
    params = []
    for layer, shape in zip(spec.layers, spec.shapes()):
        if isinstance(layer, Conv1D):
            fan_in = shape[1] * layer.kernel
            lim = 1.0 / np.sqrt(fan_in)
            params.append({
                "W": rng.uniform(-lim, lim, (layer.filters, shape[1], layer.kernel)).astype(np.float32),
                "b": rng.uniform(-lim, lim, layer.filters).astype(np.float32)})
        elif isinstance(layer, Dense):
            lim = 1.0 / np.sqrt(shape[0])
            params.append({
                "W": rng.uniform(-lim, lim, (shape[0], layer.units)).astype(np.float32),
                "b": rng.uniform(-lim, lim, layer.units).astype(np.float32)})
        else:
            params.append({})
    return params


def _conv_forward(x, W, b, stride):
    B, L, C = x.shape
    F, _, K = W.shape
    lo = (L - K) // stride + 1
    win = sliding_window_view(x, K, axis=1)[:, :lo * stride:stride]  # (B, lo, C, K)
    cols = win.reshape(B * lo, C * K)
    out = cols @ W.reshape(F, C * K).T + b
    return out.reshape(B, lo, F), cols


def _conv_backward(dout, cols, W, stride, in_shape):
    B, L, C = in_shape
    F, _, K = W.shape
    lo = dout.shape[1]
    d2 = dout.reshape(B * lo, F)
    dW = (d2.T @ cols).reshape(F, C, K)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(F, C * K)).reshape(B, lo, C, K)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    span = stride * (lo - 1) + 1
    for k in range(K):
        dx[:, k:k + span:stride] += dcols[:, :, :, k]
    return dx, dW, db


def _pool_forward(x, width):
    B, L, C = x.shape
    lo = L // width
    xr = x[:, :lo * width].reshape(B, lo, width, C)
    idx = xr.argmax(axis=2)  # first maximum wins ties
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _pool_backward(dout, idx, width, in_shape):
    B, L, C = in_shape
    lo = dout.shape[1]
    dxr = np.zeros((B, lo, width, C), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :lo * width] = dxr.reshape(B, lo * width, C)
    return dx


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------- model

@dataclass
class Model:
    spec: ModelSpec
    params: list
    encoding: Optional[Encoding] = None
    norm_stats: Optional[NormStats] = None
    labels: list = field(default_factory=list)
    seed: int = 0
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def dtype(self):
        for p in self.params:
            if p:
                return p["W"].dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Model":
        out = copy.copy(self)
        out.params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return out

    def model_id(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for p in self.params:
            for key in sorted(p):
                h.update(np.ascontiguousarray(p[key], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    # -- forward / backward ----------------------------------------------
    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_length:
            raise DataError(f"input shape {x.shape} does not match input length "
                            f"{self.spec.input_length}")
        if self.spec.layers and isinstance(self.spec.layers[0], Conv1D):
            x = x[:, :, None]
        return x

    def _run(self, x, keep=False):
        caches = []
        for layer, p in zip(self.spec.layers, self.params):
            cache = None
            if isinstance(layer, Conv1D):
                in_shape = x.shape
                x, cols = _conv_forward(x, p["W"], p["b"], layer.stride)
                cache = (cols, in_shape)
            elif isinstance(layer, ReLU):
                cache = x > 0
                x = np.where(cache, x, 0).astype(x.dtype, copy=False)
            elif isinstance(layer, MaxPool1D):
                in_shape = x.shape
                x, idx = _pool_forward(x, layer.width)
                cache = (idx, in_shape)
            elif isinstance(layer, Flatten):
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif isinstance(layer, Dense):
                cache = x
                x = x @ p["W"] + p["b"]
            if keep:
                caches.append(cache)
        return x, caches

    def logits(self, x, batch_size: int = 1024) -> np.ndarray:
        x = self._prepare(x)
        outs = [self._run(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.n_classes), self.dtype)

    def forward(self, x) -> np.ndarray:
        """Class probabilities, shape ``(batch, k)`` (or ``(k,)`` for one input)."""
        single = np.ndim(x) == 1
        probs = softmax(self.logits(x).astype(np.float64))
        return probs[0] if single else probs

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def loss_and_grads(self, x, y, batch_index: Optional[int] = None) -> tuple:
        """Mean softmax cross-entropy, parameter gradients and input gradient."""
        xin = self._prepare(x)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(xin):
            raise DataError(f"{len(xin)} inputs but {len(y)} labels")
        z, caches = self._run(xin, keep=True)
        logp = _log_softmax(z.astype(np.float64))
        B = len(y)
        loss = float(-logp[np.arange(B), y].mean())
        if not np.isfinite(loss):
            where = "" if batch_index is None else f" in batch {batch_index}"
            raise ComputeError(f"non-finite loss{where}")
        dz = np.exp(logp)
        dz[np.arange(B), y] -= 1.0
        d = (dz / B).astype(self.dtype)
        grads = [dict() for _ in self.params]
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer, p, cache = self.spec.layers[i], self.params[i], caches[i]
            if isinstance(layer, Dense):
                grads[i] = {"W": cache.T @ d, "b": d.sum(axis=0)}
                d = d @ p["W"].T
            elif isinstance(layer, ReLU):
                d = np.where(cache, d, 0).astype(d.dtype, copy=False)
            elif isinstance(layer, Flatten):
                d = d.reshape(cache)
            elif isinstance(layer, MaxPool1D):
                d = _pool_backward(d, cache[0], layer.width, cache[1])
            elif isinstance(layer, Conv1D):
                d, dW, db = _conv_backward(d, cache[0], p["W"], layer.stride, cache[1])
                grads[i] = {"W": dW, "b": db}
        dx = d.reshape(len(y), -1)
        return loss, grads, dx

    def input_gradient(self, x, y) -> tuple:
        loss, _, dx = self.loss_and_grads(x, y)
        return loss, dx


def new_model(spec: ModelSpec, seed: int = 0, **kwargs) -> Model:
    return Model(spec, _init_params(spec, np.random.default_rng(seed)), seed=seed, **kwargs)


# -------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    seed: int = 0
    patience: int = 5
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise DataError("epochs and batch_size must be >= 1, learning_rate > 0")


def train(spec: ModelSpec, train_xy, val_xy, config: TrainConfig = TrainConfig(),
          **model_kwargs) -> Model:
    """Mini-batch SGD (with optional momentum); keeps the best-validation-accuracy epoch."""
    X, y = np.asarray(train_xy[0], dtype=np.float32), np.asarray(train_xy[1], dtype=np.int64)
    Xv, yv = np.asarray(val_xy[0], dtype=np.float32), np.asarray(val_xy[1], dtype=np.int64)
    if len(X) == 0:
        raise DataError("empty training set")
    if X.shape[1] != spec.input_length:
        raise DataError(f"encoding length {X.shape[1]} != model input {spec.input_length}")
    model = new_model(spec, config.seed, **model_kwargs)
    rng = np.random.default_rng(config.seed + 1)
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    lr = np.float32(config.learning_rate)
    mu = np.float32(config.momentum)
    best_acc, best_params, since_best = -1.0, None, 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        losses = []
        for bi, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = model.loss_and_grads(X[idx], y[idx], batch_index=bi)
            losses.append(loss * len(idx))
            for p, g, v in zip(model.params, grads, velocity):
                for k in p:
                    v[k] *= mu
                    v[k] -= lr * g[k]
                    p[k] += v[k]
        val_acc = float((model.predict(Xv) == yv).mean()) if len(Xv) else 0.0
        epoch_loss = float(np.sum(losses) / len(X))
        history.append({"epoch": epoch, "loss": epoch_loss, "val_accuracy": val_acc})
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch, epoch_loss, val_acc)
        if not np.isfinite(epoch_loss):
            raise ComputeError(f"training diverged at epoch {epoch}")
        if val_acc > best_acc:
            best_acc, since_best = val_acc, 0
            best_params = [{k: v.copy() for k, v in p.items()} for p in model.params]
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.params = best_params
    model.history = history
    return model


# ------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray
    support: np.ndarray
    accuracy: float
    confusion: np.ndarray
    undefined_precision: np.ndarray


def metrics_from_predictions(y_true, y_pred, n_classes: int) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise DataError("cannot evaluate on an empty sample set")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    undefined = predicted == 0
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=~undefined)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    fscore = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return Metrics(precision, recall, fscore, actual, float(tp.sum() / len(y_true)), cm,
                   undefined)


def evaluate(model: Model, X, y) -> Metrics:
    return metrics_from_predictions(y, model.predict(X), model.spec.n_classes)


# ------------------------------------------------------------------ model file

class ModelFileError(DataError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelChecksumError(ModelFileError):
    pass


def model_to_bytes(model: Model) -> bytes:
    manifest = []
    blobs = []
    for i, p in enumerate(model.params):
        for key in sorted(p):
            arr = np.ascontiguousarray(p[key], dtype="<f4")
            manifest.append([i, key, list(arr.shape)])
            blobs.append(arr.tobytes())
    header = {
        "spec": model.spec.to_dict(),
        "encoding": model.encoding.to_dict() if model.encoding else None,
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats else None,
        "labels": list(model.labels),
        "seed": model.seed,
        "params": manifest,
    }
    js = json.dumps(header, sort_keys=True).encode()
    body = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(js)) + js + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> Model:
    if data[:4] != MODEL_MAGIC:
        raise ModelVersionError("not an antkit model file (bad magic)")
    if len(data) < 14:
        raise ModelChecksumError("model file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ModelChecksumError("model file checksum mismatch")
    version, jlen = struct.unpack_from("<HI", body, 4)
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model format version {version}")
    header = json.loads(body[10:10 + jlen])
    spec = ModelSpec.from_dict(header["spec"])
    params = [dict() for _ in spec.layers]
    off = 10 + jlen
    for i, key, shape in header["params"]:
        n = int(np.prod(shape))
        params[i][key] = np.frombuffer(body[off:off + 4 * n], dtype="<f4").reshape(shape).astype(np.float32)
        off += 4 * n
    return Model(spec, params,
                 Encoding.from_dict(header["encoding"]) if header["encoding"] else None,
                 NormStats(**header["norm_stats"]) if header["norm_stats"] else None,
                 header["labels"], header["seed"])


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
