"""Small convolutional encoder with an exposed last-conv activation map.

Three stride-2 conv stages followed by global average pooling, a linear
projection and L2 normalization.  The post-ReLU activations of the last
conv stage are returned alongside the embedding so spatial importance maps
can be computed against them.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# affine pixel normalization applied by training/eval pipelines before the
# encoder; forward() itself consumes whatever tensor it is given
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


def normalize_pixels(images: np.ndarray) -> np.ndarray:
    """Map [0,1] pixels to the encoder's input range (mean 0.5, std 0.5)."""
    return ((np.asarray(images, dtype=np.float32) - np.float32(PIXEL_MEAN))
            / np.float32(PIXEL_STD))


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64

    def __post_init__(self):
        if not self.channels:
            raise ValueError("channels must be non-empty")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be > 0")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by "
                f"2^{len(self.channels)} stride-2 stages")

    @property
    def grid_size(self) -> int:
        return self.input_size // (2 ** len(self.channels))


@dataclass
class EncoderParams:
    """Configuration plus the named parameter tensors of one encoder."""

    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def copy(self, requires_grad: bool | None = None) -> "EncoderParams":
        out = {}
        for name, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = ad.tensor(t.data.copy(), requires_grad=rg)
        return EncoderParams(self.config, out)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}


@dataclass
class EncoderOutput:
    embedding: Tensor
    conv5_acts: Tensor


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Kaiming-uniform weights (variance 2/fan_in), zero biases; the draw
    order is fixed so a seed reproduces parameters bit for bit."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    cin = 3
    for i, cout in enumerate(config.channels, start=1):
        fan_in = cin * 9
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(np.float32)
        tensors[f"conv{i}.weight"] = ad.tensor(w, requires_grad=True)
        tensors[f"conv{i}.bias"] = ad.tensor(np.zeros(cout, np.float32), requires_grad=True)
        cin = cout
    bound = math.sqrt(6.0 / cin)
    w = rng.uniform(-bound, bound, size=(config.embedding_dim, cin)).astype(np.float32)
    tensors["head.weight"] = ad.tensor(w, requires_grad=True)
    tensors["head.bias"] = ad.tensor(np.zeros(config.embedding_dim, np.float32),
                                     requires_grad=True)
    return EncoderParams(config, tensors)


def _conv_stages(params: EncoderParams, x: Tensor) -> Tensor:
    t = params.tensors
    h = x
    for i, cout in enumerate(params.config.channels, start=1):
        h = ad.conv2d(h, t[f"conv{i}.weight"], stride=2, padding=1)
        h = ad.add(h, ad.reshape(t[f"conv{i}.bias"], (1, cout, 1, 1)))
        h = ad.relu(h)
    return h


def _head(params: EncoderParams, conv5: Tensor) -> Tensor:
    t = params.tensors
    pooled = ad.global_avg_pool(conv5)                       # [N, C]
    emb = ad.add(ad.matmul(pooled, ad.transpose(t["head.weight"])), t["head.bias"])
    return ad.l2_normalize(emb, eps=1e-12, axis=1)


def forward_batch(params: EncoderParams, x) -> tuple[Tensor, Tensor]:
    """Batched forward pass: [N,3,S,S] -> (embedding [N,D], conv5 [N,C,g,g])."""
    x = ad.as_tensor(x)
    cfg = params.config
    s = cfg.input_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
        raise ValueError(f"encoder expects [N,3,{s},{s}] input, got {x.shape}")
    conv5 = _conv_stages(params, x)
    return _head(params, conv5), conv5


def forward(params: EncoderParams, image) -> EncoderOutput:
    """Single-image forward pass: [3,S,S] -> EncoderOutput.

    The embedding is computed through the returned conv5_acts tensor, so
    gradients of anything built on the embedding reach conv5_acts.
    """
    image = ad.as_tensor(image)
    cfg = params.config
    s = cfg.input_size
    if image.ndim != 3 or image.shape != (3, s, s):
        raise ValueError(f"encoder expects a [3,{s},{s}] image, got {image.shape}")
    batch = ad.reshape(image, (1,) + image.shape)
    conv5_b = _conv_stages(params, batch)
    g = cfg.grid_size
    c = cfg.channels[-1]
    conv5_single = ad.reshape(conv5_b, (c, g, g))
    emb = _head(params, ad.reshape(conv5_single, (1, c, g, g)))
    embedding = ad.reshape(emb, (cfg.embedding_dim,))
    return EncoderOutput(embedding=embedding, conv5_acts=conv5_single)


def embed_images(params: EncoderParams, images: np.ndarray,
                 batch_size: int = 128) -> np.ndarray:
    """Embeddings for a stack of [0,1] images, computed without a graph."""
    images = np.asarray(images, dtype=np.float32)
    out = np.empty((images.shape[0], params.config.embedding_dim), np.float32)
    with ad.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            hi = min(lo + batch_size, images.shape[0])
            emb, _ = forward_batch(params, normalize_pixels(images[lo:hi]))
            out[lo:hi] = emb.data
    return out


@dataclass
class LinearProbe:
    """Softmax linear classifier over frozen-encoder embeddings."""

    weight: np.ndarray   # [n_classes, D]
    bias: np.ndarray     # [n_classes]
    accuracy: float

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        logits = embeddings @ self.weight.T + self.bias
        return np.argmax(logits, axis=1)


def linear_probe_train(params: EncoderParams, dataset, epochs: int,
                       lr: float = 0.5) -> LinearProbe:
    """Train a softmax cross-entropy linear classifier on embeddings.

    ``dataset`` is a sequence of (image [3,S,S] in [0,1], int label) pairs.
    The encoder is read-only; one epoch is one full-batch gradient step.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    images = np.stack([np.asarray(img, np.float32) for img, _ in dataset])
    labels = np.array([int(lbl) for _, lbl in dataset])
    if len(np.unique(labels)) == 1:
        warnings.warn("single-class dataset: probe accuracy is degenerate")

    feats = embed_images(params, images)
    n, d = feats.shape
    n_classes = int(labels.max()) + 1
    onehot = np.zeros((n, n_classes), np.float32)
    onehot[np.arange(n), labels] = 1.0

    w = np.zeros((n_classes, d), np.float32)
    b = np.zeros(n_classes, np.float32)
    for _ in range(int(epochs)):
        logits = feats @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gl = (p - onehot) / np.float32(n)
        w -= np.float32(lr) * (gl.T @ feats)
        b -= np.float32(lr) * gl.sum(axis=0)

    pred = np.argmax(feats @ w.T + b, axis=1)
    acc = float(np.mean(pred == labels))
    return LinearProbe(weight=w, bias=b, accuracy=acc)
