"""Network assembly, SGD training, patch inference and vote aggregation.

The classifier is three conv+relu+maxpool stages feeding a bias-free dense
softmax layer: with patch size p and same-padding convs, spatial dims halve
at each pool (p -> p/2 -> p/4 -> p/8), so p must be divisible by 8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .pipeline import CHANNEL_IDS, FormatError, parse_key_values

CHECKPOINT_MAGIC = b"MMRC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    patch_size: int = 32
    channels: tuple[str, ...] = ("Gr", "L", "U", "V")
    filters: tuple[int, int, int] = (32, 32, 64)
    kernel_size: int = 5
    n_classes: int = 9
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size <= 0 or self.patch_size % 8 != 0:
            raise ValueError(f"patch size must be a positive multiple of 8 "
                             f"(three pooling halvings), got {self.patch_size}")
        if len(self.filters) != 3 or any(f < 1 for f in self.filters):
            raise ValueError(f"need three positive filter counts, got {self.filters}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if not self.channels:
            raise ValueError("channel list is empty")
        for name in self.channels:
            if name not in CHANNEL_IDS:
                raise ValueError(f"unknown channel {name!r}; expected one of {list(CHANNEL_IDS)}")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"duplicate channels in {self.channels}")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")

    @property
    def dense_inputs(self) -> int:
        side = self.patch_size // 8
        return side * side * self.filters[2]


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        # learning rate 0 is allowed as an explicit no-op run
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class Network:
    config: ModelConfig
    conv_layers: list[nn.ConvParams]
    dense_weights: np.ndarray

    def astype(self, dtype) -> "Network":
        layers = [nn.ConvParams(kernels=c.kernels.astype(dtype),
                                biases=c.biases.astype(dtype),
                                stride=c.stride, padding=c.padding)
                  for c in self.conv_layers]
        return Network(config=self.config, conv_layers=layers,
                       dense_weights=self.dense_weights.astype(dtype))

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.conv_layers:
            params.extend([layer.kernels, layer.biases])
        params.append(self.dense_weights)
        return params


def build_model(config: ModelConfig) -> Network:
    """He-initialized network per the config; biases start at zero."""
    config.validate()
    k = config.kernel_size
    pad = (k - 1) // 2
    depths = [len(config.channels), *config.filters[:2]]
    layers = []
    for i, (c_in, c_out) in enumerate(zip(depths, config.filters)):
        kernels = nn.he_init((c_out, k, k, c_in), seed=config.seed + i)
        layers.append(nn.ConvParams(kernels=kernels,
                                    biases=np.zeros(c_out, dtype=np.float32),
                                    stride=1, padding=pad))
    dense = nn.he_init((config.n_classes, config.dense_inputs), seed=config.seed + 3)
    return Network(config=config, conv_layers=layers, dense_weights=dense)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward(net: Network, x: np.ndarray, keep_cache: bool):
    """Run the conv stages and dense layer; x is (B, p, p, C)."""
    caches = []
    a = x
    for layer in net.conv_layers:
        cols_box: list = []
        z = nn.conv2d_forward(a, layer, _cols_out=cols_box if keep_cache else None)
        r = nn.relu(z)
        pooled, idx = nn.maxpool2x2_forward(r)
        if keep_cache:
            caches.append((a, cols_box[0], z, idx))
        a = pooled
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ net.dense_weights.T
    return logits, flat, a.shape, caches


def forward_shapes(net: Network) -> list[tuple[int, ...]]:
    """Activation shape chain for one patch: input, conv/pool stages, logits."""
    cfg = net.config
    x = np.zeros((1, cfg.patch_size, cfg.patch_size, len(cfg.channels)),
                 dtype=net.dense_weights.dtype)
    shapes = [x.shape[1:]]
    a = x
    for layer in net.conv_layers:
        z = nn.conv2d_forward(a, layer)
        shapes.append(z.shape[1:])
        a, _ = nn.maxpool2x2_forward(nn.relu(z))
        shapes.append(a.shape[1:])
    logits = a.reshape(1, -1) @ net.dense_weights.T
    shapes.append(logits.shape[1:])
    return shapes


def _batch_loss_and_grads(net: Network, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch plus gradients for every parameter
    and for the input batch."""
    logits, flat, pooled_shape, caches = _forward(net, x, keep_cache=True)
    b = x.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = float(-log_probs[np.arange(b), y].mean())

    d_logits = np.exp(log_probs)
    d_logits[np.arange(b), y] -= 1.0
    d_logits /= b
    d_dense = d_logits.T @ flat
    d = (d_logits @ net.dense_weights).reshape(pooled_shape)

    conv_grads = [None] * len(net.conv_layers)
    for i in range(len(net.conv_layers) - 1, -1, -1):
        a_in, cols, z_pre, idx = caches[i]
        d = nn.maxpool2x2_backward(idx, d)
        d = nn.relu_backward(z_pre, d)
        d, grads = nn.conv2d_backward(a_in, net.conv_layers[i], d, _cols=cols)
        conv_grads[i] = grads
    return loss, conv_grads, d_dense, d


def train(net: Network, x: np.ndarray, y: np.ndarray,
          config: TrainConfig) -> tuple[Network, list[float]]:
    """Mini-batch SGD with momentum; updates net in place.

    Deterministic per seed: the per-epoch shuffle and the within-batch
    reduction order are fixed. Returns (net, per-epoch mean loss).
    """
    config.validate()
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, p, p, C) dataset, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    n_classes = net.config.n_classes
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes}): min {y.min()}, max {y.max()}")
    expected = (net.config.patch_size, net.config.patch_size, len(net.config.channels))
    if x.shape[1:] != expected:
        raise ValueError(f"sample shape {x.shape[1:]} does not match model input {expected}")

    rng = np.random.default_rng(config.seed)
    n = x.shape[0]
    velocities = [np.zeros_like(p) for p in net.parameters()]
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, conv_grads, d_dense, _ = _batch_loss_and_grads(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise ValueError(f"training diverged: non-finite loss {loss}")
            batch_losses.append(loss)
            grads = []
            for g in conv_grads:
                grads.extend([g.kernels, g.biases])
            grads.append(d_dense)
            params = net.parameters()
            new_params = []
            for j, (p, g) in enumerate(zip(params, grads)):
                p_new, velocities[j] = nn.sgd_step(p, g, config.learning_rate,
                                                   config.momentum, velocities[j])
                new_params.append(p_new)
            for i, layer in enumerate(net.conv_layers):
                layer.kernels = new_params[2 * i]
                layer.biases = new_params[2 * i + 1]
            net.dense_weights = new_params[-1]
        history.append(float(np.mean(batch_losses)))
    return net, history


# ---------------------------------------------------------------------------
# Inference and vote aggregation
# ---------------------------------------------------------------------------


def predict_batch(net: Network, patches: np.ndarray,
                  chunk_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Class ids and probabilities for (n, p, p, C) patches; ties go to the
    lowest class id."""
    if patches.ndim != 4:
        raise ValueError(f"expected (n, p, p, C) patches, got shape {patches.shape}")
    ids = np.empty(patches.shape[0], dtype=np.int64)
    probs = np.empty((patches.shape[0], net.config.n_classes), dtype=np.float64)
    for start in range(0, patches.shape[0], chunk_size):
        chunk = patches[start:start + chunk_size]
        logits, _, _, _ = _forward(net, chunk, keep_cache=False)
        p = nn.softmax(logits)
        ids[start:start + chunk.shape[0]] = p.argmax(axis=1)
        probs[start:start + chunk.shape[0]] = p
    return ids, probs


def predict_patch(net: Network, patch: np.ndarray) -> tuple[int, np.ndarray]:
    """Predicted class id and probability vector for one (p, p, C) patch."""
    if patch.ndim != 3:
        raise ValueError(f"expected a (p, p, C) patch, got shape {patch.shape}")
    ids, probs = predict_batch(net, patch[None])
    return int(ids[0]), probs[0]


@dataclass
class VoteHistogram:
    """Per-class patch vote counts for one frame."""

    counts: np.ndarray
    total: int = field(default=-1)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.total < 0:
            self.total = int(self.counts.sum())
        if int(self.counts.sum()) != self.total or (self.counts < 0).any():
            raise ValueError(f"histogram counts {self.counts} do not sum to total {self.total}")


def vote_frame(predictions: Iterable[int], n_classes: int) -> tuple[int | None, VoteHistogram]:
    """Majority vote over patch predictions; ties go to the lowest class id.

    With zero surviving patches the frame gets the distinguished
    "no-decision" outcome (None) instead of a class.
    """
    preds = np.asarray(list(predictions), dtype=np.int64)
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes):
        raise ValueError(f"prediction outside [0, {n_classes})")
    counts = np.bincount(preds, minlength=n_classes)
    hist = VoteHistogram(counts=counts, total=int(preds.size))
    if preds.size == 0:
        return None, hist
    return int(counts.argmax()), hist


def temporal_fuse(histograms: Sequence[VoteHistogram]) -> int | None:
    """Sum vote histograms from consecutive frames and take the argmax.

    Ties go to the lowest class id; all-empty histograms fuse to the
    no-decision outcome (None).
    """
    if not histograms:
        raise ValueError("need at least one histogram to fuse")
    summed = np.sum([h.counts for h in histograms], axis=0)
    if summed.sum() == 0:
        return None
    return int(summed.argmax())


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def _config_text(config: ModelConfig) -> str:
    return (f"patch_size={config.patch_size}\n"
            f"channels={','.join(config.channels)}\n"
            f"filters={','.join(str(f) for f in config.filters)}\n"
            f"kernel_size={config.kernel_size}\n"
            f"n_classes={config.n_classes}\n"
            f"seed={config.seed}\n")


def _config_from_text(text: str, source: str) -> ModelConfig:
    pairs = parse_key_values(text, source=source)
    try:
        return ModelConfig(
            patch_size=int(pairs["patch_size"]),
            channels=tuple(pairs["channels"].split(",")),
            filters=tuple(int(f) for f in pairs["filters"].split(",")),
            kernel_size=int(pairs["kernel_size"]),
            n_classes=int(pairs["n_classes"]),
            seed=int(pairs["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{source}: bad checkpoint config ({exc})") from exc


def save_checkpoint(net: Network, path) -> None:
    """Write magic, version, config text and raw little-endian f32 weights."""
    for param in net.parameters():
        if param.dtype != np.float32:
            raise ValueError(f"checkpoints store float32 weights; got {param.dtype} "
                             "(64-bit networks are for gradient checking only)")
    config_blob = _config_text(net.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)))
        fh.write(config_blob)
        for param in net.parameters():
            fh.write(np.ascontiguousarray(param, dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, config_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, "
                          f"expected {CHECKPOINT_VERSION}")
    offset = 12
    if len(data) < offset + config_len:
        raise FormatError(f"{path}: truncated config block at byte offset {offset}")
    config = _config_from_text(data[offset:offset + config_len].decode("utf-8"), str(path))
    config.validate()
    offset += config_len

    net = build_model(config)
    for param in net.parameters():
        nbytes = param.size * 4
        if len(data) < offset + nbytes:
            raise FormatError(f"{path}: truncated weights at byte offset {offset} "
                              f"(need {nbytes} bytes, have {len(data) - offset})")
        values = np.frombuffer(data, dtype="<f4", count=param.size, offset=offset)
        param[...] = values.reshape(param.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at byte offset {offset}")
    return net


def require_channels(model_channels: Sequence[str], available: Sequence[str]) -> None:
    """Reject inference when the data cannot supply the model's channel stack."""
    missing = [c for c in model_channels if c not in available]
    if missing:
        raise ValueError(f"channel mismatch: model needs {list(model_channels)}, "
                         f"data provides {list(available)} (missing {missing})")
