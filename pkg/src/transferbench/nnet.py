"""Minimal feedforward-classifier core.

Networks are small stacks of dense / conv / relu / flatten layers with a
terminal softmax, all in float64. Everything needed by the attack side is
here: deterministic training, batched inference, parameter gradients, and
gradients with respect to the input pixels. Backpropagation is written out
by hand for the fixed layer set; there is no autodiff.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
)

PROB_FLOOR = 1e-12

MAGIC = b"TBNET1\n"

DENSE = "dense"
CONV = "conv"
RELU = "relu"
FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: tuple[int, ...] = ()

    def __str__(self) -> str:
        return " ".join([self.kind, *map(str, self.params)])


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(DENSE, (in_dim, out_dim))


def conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec(CONV, (in_ch, out_ch, kernel, stride))


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


@dataclass(frozen=True)
class ArchSpec:
    """Layer stack plus the input image shape (H, W, C) and class count."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    @property
    def input_size(self) -> int:
        h, w, c = self.input_shape
        return h * w * c


def infer_shapes(arch: ArchSpec) -> list[tuple[int, ...]]:
    """Propagate shapes through the stack; raises ShapeError if layers do not chain.

    Shapes are (H, W, C) triples until a flatten, single-element tuples after.
    The terminal shape must be (num_classes,).
    """
    shape: tuple[int, ...] = arch.input_shape
    out = []
    for i, layer in enumerate(arch.layers):
        where = f"layer {i} ({layer})"
        if layer.kind == DENSE:
            in_dim, out_dim = layer.params
            if len(shape) != 1:
                raise ShapeError(f"{where}: dense requires a flattened input, have {shape}")
            if shape[0] != in_dim:
                raise ShapeError(f"{where}: expects {in_dim} inputs, previous layer gives {shape[0]}")
            shape = (out_dim,)
        elif layer.kind == CONV:
            in_ch, out_ch, k, s = layer.params
            if len(shape) != 3:
                raise ShapeError(f"{where}: conv requires an image input, have {shape}")
            h, w, c = shape
            if c != in_ch:
                raise ShapeError(f"{where}: expects {in_ch} channels, previous layer gives {c}")
            if k < 1 or s < 1 or h < k or w < k:
                raise ShapeError(f"{where}: kernel {k} stride {s} does not fit {h}x{w}")
            shape = ((h - k) // s + 1, (w - k) // s + 1, out_ch)
        elif layer.kind == RELU:
            pass
        elif layer.kind == FLATTEN:
            if len(shape) != 3:
                raise ShapeError(f"{where}: flatten requires an image input, have {shape}")
            shape = (int(np.prod(shape)),)
        else:
            raise ShapeError(f"{where}: unknown layer kind {layer.kind!r}")
        out.append(shape)
    if len(shape) != 1 or shape[0] != arch.num_classes:
        raise ShapeError(
            f"terminal shape {shape} does not match num_classes={arch.num_classes}"
        )
    return out


@dataclass
class Network:
    """Immutable-after-training classifier: arch, per-layer weights, metadata."""

    arch: ArchSpec
    weights: list[dict[str, np.ndarray]]
    name: str = ""
    seed: int = 0
    clean_accuracy: float | None = None


def init_network(arch: ArchSpec, seed: int, name: str = "") -> Network:
    """Seeded Glorot-uniform init: weights ~ U(+-sqrt(6/(fan_in+fan_out))), zero bias."""
    infer_shapes(arch)
    rng = np.random.default_rng(seed)
    weights: list[dict[str, np.ndarray]] = []
    for layer in arch.layers:
        if layer.kind == DENSE:
            in_dim, out_dim = layer.params
            lim = math.sqrt(6.0 / (in_dim + out_dim))
            weights.append({
                "w": rng.uniform(-lim, lim, size=(in_dim, out_dim)),
                "b": np.zeros(out_dim),
            })
        elif layer.kind == CONV:
            in_ch, out_ch, k, _ = layer.params
            lim = math.sqrt(6.0 / (k * k * in_ch + k * k * out_ch))
            weights.append({
                "w": rng.uniform(-lim, lim, size=(k, k, in_ch, out_ch)),
                "b": np.zeros(out_ch),
            })
        else:
            weights.append({})
    return Network(arch=arch, weights=weights, name=name, seed=seed)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B,H,W,C) -> (B,Ho,Wo,k,k,C) patch tensor for valid convolution."""
    b, h, w, c = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    cols = np.empty((b, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i : i + s * ho : s, j : j + s * wo : s, :]
    return cols


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(net: Network, pixels: np.ndarray) -> np.ndarray:
    """Validate a (B,N) or (N,) pixel array and reshape to (B,H,W,C)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    n = net.arch.input_size
    if pixels.ndim == 1:
        pixels = pixels[None, :]
    if pixels.ndim != 2 or pixels.shape[1] != n:
        raise ShapeError(f"input has shape {pixels.shape}, expected (*, {n})")
    if not np.all(np.isfinite(pixels)):
        raise NumericError("non-finite pixel values")
    return pixels.reshape(pixels.shape[0], *net.arch.input_shape)


def _forward_cached(net: Network, xb: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the stack on a (B,H,W,C) batch; returns (probs, per-layer caches)."""
    caches = []
    x = xb
    for layer, wts in zip(net.arch.layers, net.weights):
        if layer.kind == DENSE:
            caches.append(x)
            x = x @ wts["w"] + wts["b"]
        elif layer.kind == CONV:
            _, _, k, s = layer.params
            cols = _im2col(x, k, s)
            caches.append((x.shape, cols))
            b, ho, wo = cols.shape[:3]
            flat = cols.reshape(b, ho, wo, -1)
            x = flat @ wts["w"].reshape(-1, wts["w"].shape[-1]) + wts["b"]
        elif layer.kind == RELU:
            caches.append(x)
            x = np.maximum(x, 0.0)
        else:  # flatten
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return _softmax(x), caches


def _backward(
    net: Network,
    caches: list,
    dlogits: np.ndarray,
    want_params: bool,
) -> tuple[np.ndarray, list[dict[str, np.ndarray]] | None]:
    """Backpropagate d(loss)/d(logits) to the input (and optionally the weights)."""
    grads: list[dict[str, np.ndarray]] | None = None
    if want_params:
        grads = [{} for _ in net.arch.layers]
    d = dlogits
    for i in range(len(net.arch.layers) - 1, -1, -1):
        layer = net.arch.layers[i]
        wts = net.weights[i]
        cache = caches[i]
        if layer.kind == DENSE:
            if want_params:
                grads[i] = {"w": cache.T @ d, "b": d.sum(axis=0)}
            d = d @ wts["w"].T
        elif layer.kind == CONV:
            in_ch, out_ch, k, s = layer.params
            x_shape, cols = cache
            b, ho, wo = cols.shape[:3]
            if want_params:
                flat = cols.reshape(b * ho * wo, -1)
                grads[i] = {
                    "w": (flat.T @ d.reshape(b * ho * wo, out_ch)).reshape(k, k, in_ch, out_ch),
                    "b": d.sum(axis=(0, 1, 2)),
                }
            dcols = (d @ wts["w"].reshape(-1, out_ch).T).reshape(b, ho, wo, k, k, in_ch)
            dx = np.zeros(x_shape, dtype=np.float64)
            for ki in range(k):
                for kj in range(k):
                    dx[:, ki : ki + s * ho : s, kj : kj + s * wo : s, :] += dcols[:, :, :, ki, kj, :]
            d = dx
        elif layer.kind == RELU:
            d = d * (cache > 0.0)
        else:  # flatten
            d = d.reshape(cache)
    return d, grads


def forward(net: Network, pixels: np.ndarray) -> np.ndarray:
    """Softmax probabilities for one flat pixel vector."""
    xb = _as_batch(net, pixels)
    if xb.shape[0] != 1:
        raise ShapeError("forward takes a single sample; use forward_batch")
    probs, _ = _forward_cached(net, xb)
    return probs[0]


def forward_batch(net: Network, pixels: np.ndarray) -> np.ndarray:
    """Softmax probabilities for a (B, N) pixel matrix."""
    probs, _ = _forward_cached(net, _as_batch(net, pixels))
    return probs


def predict_batch(net: Network, pixels: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(net, pixels), axis=1)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln p[label], with p floored at 1e-12 so a collapsed probability stays finite."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise DataError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-math.log(max(float(probs[label]), PROB_FLOOR)))


def input_gradient(net: Network, pixels: np.ndarray, label: int) -> np.ndarray:
    """Gradient of cross_entropy(forward(net, x), label) with respect to x.

    Softmax and cross-entropy fold into d(logits) = p - onehot(label), then the
    layer stack is walked backwards. Matches central finite differences to
    <= 1e-5 relative error in float64.
    """
    xb = _as_batch(net, pixels)
    if xb.shape[0] != 1:
        raise ShapeError("input_gradient takes a single sample")
    if not 0 <= label < net.arch.num_classes:
        raise DataError(f"label {label} out of range")
    probs, caches = _forward_cached(net, xb)
    dlogits = probs.copy()
    dlogits[0, label] -= 1.0
    dx, _ = _backward(net, caches, dlogits, want_params=False)
    return dx.reshape(-1)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSettings:
    """Plain mini-batch gradient descent; deliberately the only training optimizer."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.5
    holdout_frac: float = 0.2


def _batch_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.mean(np.log(p)))


def accuracy(net: Network, pixels: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict_batch(net, pixels) == labels))


def train_model(
    dataset,
    arch: ArchSpec,
    train_cfg: TrainSettings,
    seed: int,
    name: str = "",
    batch_hook=None,
) -> Network:
    """Train a fresh network with seeded mini-batch gradient descent.

    Identical (dataset, arch, config, seed) yields bit-identical weights. A
    holdout split (holdout_frac of the data, seeded) provides the clean
    accuracy recorded in the network metadata; with holdout_frac=0 accuracy
    is measured on the training data itself.

    ``batch_hook(net, xb, yb) -> xb`` may replace each batch before the
    gradient step; the adversarial-training loop uses this.
    """
    x = dataset.pixel_matrix()
    y = dataset.labels()
    if len(x) == 0:
        raise DataError("train_model: empty dataset")
    if y.max(initial=-1) >= arch.num_classes:
        raise DataError("train_model: label out of range for arch.num_classes")
    if tuple(dataset.shape) != tuple(arch.input_shape):
        raise ShapeError(
            f"dataset shape {dataset.shape} does not match arch input {arch.input_shape}"
        )

    # epochs=0 must return exactly the seeded initialization, so the shuffle
    # stream is derived from the same seed but kept separate from the init rng
    net = init_network(arch, seed=seed, name=name)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    n_hold = int(round(train_cfg.holdout_frac * len(x)))
    perm = rng.permutation(len(x))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) == 0:
        raise DataError("train_model: holdout leaves no training data")

    lr = train_cfg.learning_rate
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), train_cfg.batch_size):
            idx = train_idx[order[start : start + train_cfg.batch_size]]
            xb, yb = x[idx], y[idx]
            if batch_hook is not None:
                xb = batch_hook(net, xb, yb)
            xbatch = _as_batch(net, xb)
            probs, caches = _forward_cached(net, xbatch)
            loss = _batch_ce(probs, yb)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss for model {name!r}")
            dlogits = probs.copy()
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            _, grads = _backward(net, caches, dlogits, want_params=True)
            for wts, g in zip(net.weights, grads):
                for key in wts:
                    wts[key] -= lr * g[key]

    eval_idx = hold_idx if len(hold_idx) else np.arange(len(x))
    net.clean_accuracy = accuracy(net, x[eval_idx], y[eval_idx])
    return net


# ---------------------------------------------------------------------------
# checkpoints: text header + little-endian f64 blobs, one length field per layer


def _arch_to_jsonable(arch: ArchSpec) -> dict:
    return {
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
        "layers": [[layer.kind, *layer.params] for layer in arch.layers],
    }


def _arch_from_jsonable(obj: dict) -> ArchSpec:
    try:
        layers = tuple(LayerSpec(entry[0], tuple(int(p) for p in entry[1:])) for entry in obj["layers"])
        arch = ArchSpec(
            input_shape=tuple(int(v) for v in obj["input_shape"]),
            layers=layers,
            num_classes=int(obj["num_classes"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"invalid arch description in header: {exc}") from exc
    infer_shapes(arch)
    return arch


def save_model(net: Network, path: str | Path) -> None:
    """Write MAGIC, a one-line JSON header, then per-layer f64 weight blobs."""
    header = {
        "arch": _arch_to_jsonable(net.arch),
        "name": net.name,
        "seed": net.seed,
        "clean_accuracy": net.clean_accuracy,
        "blob_order": ["w", "b"],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for wts in net.weights:
            vals = [np.ascontiguousarray(wts[key], dtype=np.float64) for key in ("w", "b") if key in wts]
            count = sum(v.size for v in vals)
            fh.write(struct.pack("<Q", count))
            for v in vals:
                fh.write(v.astype("<f8", copy=False).tobytes())


def load_model(path: str | Path) -> Network:
    """Read a checkpoint; forward outputs are bit-identical to the saved network."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic, not a network checkpoint")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(blob[len(MAGIC) : nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    arch = _arch_from_jsonable(header.get("arch", {}))

    offset = nl + 1
    weights: list[dict[str, np.ndarray]] = []
    for layer in arch.layers:
        if layer.kind == DENSE:
            in_dim, out_dim = layer.params
            shapes = {"w": (in_dim, out_dim), "b": (out_dim,)}
        elif layer.kind == CONV:
            in_ch, out_ch, k, _ = layer.params
            shapes = {"w": (k, k, in_ch, out_ch), "b": (out_ch,)}
        else:
            shapes = {}
        expected = sum(int(np.prod(s)) for s in shapes.values())
        if offset + 8 > len(blob):
            raise CorruptionError(f"{path}: truncated before layer length field")
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if count != expected:
            raise CorruptionError(
                f"{path}: layer '{layer}' declares {count} values, header implies {expected}"
            )
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CorruptionError(f"{path}: truncated weight blob for layer '{layer}'")
        flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += nbytes
        wts = {}
        pos = 0
        for key, shape in shapes.items():
            size = int(np.prod(shape))
            wts[key] = flat[pos : pos + size].reshape(shape).copy()
            pos += size
        weights.append(wts)
    if offset != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - offset} trailing bytes after weights")

    acc = header.get("clean_accuracy")
    return Network(
        arch=arch,
        weights=weights,
        name=str(header.get("name", "")),
        seed=int(header.get("seed", 0)),
        clean_accuracy=None if acc is None else float(acc),
    )
