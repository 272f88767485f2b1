"""Frozen classifier, conditional style generator, and encoder.

The generator maps a latent w and a class label to an image in three
steps: per-stage affine maps turn [w, embed(label)] into style vectors;
each synthesis stage modulates its hidden state channel-wise by the
stage's style before a dense layer; a final dense projection with a
sigmoid produces pixels. The concatenated per-stage styles form the
style space searched by the counterfactual algorithms; the output
projection is not part of it.

`generate_from_w` is literally `synthesize(style_of(w, y))`, so the
factorization of the two entry points is exact by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .rng import Rng
from .weights import save_weights, load_weights

HEALTHY = 0
POSITIVE = 1
NUM_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    z_dim: int = 16
    w_dim: int = 16
    embed_dim: int = 8
    stage_channels: tuple[int, ...] = (64, 64, 64)
    mapping_hidden: tuple[int, ...] = (32,)
    classifier_hidden: tuple[int, ...] = (128, 64)
    encoder_hidden: tuple[int, ...] = (128, 64)

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size

    @property
    def style_dim(self) -> int:
        return sum(self.stage_channels)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _build_mlp(rng: Rng, dims: list[int]) -> nn.Mlp:
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = nn.IDENTITY if i == len(dims) - 2 else nn.LEAKY_RELU
        layers.append(nn.init_dense(rng, a, b, act))
    return nn.Mlp(layers)


class Classifier:
    """Dense classifier producing 2-class probabilities."""

    def __init__(self, mlp: nn.Mlp, config: ModelConfig):
        self.mlp = mlp
        self.config = config

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.mlp.forward(np.asarray(x, dtype=self.mlp.layers[0].weight.dtype))

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        probs = nn.softmax(self.logits(xb).astype(np.float64))
        return probs[0] if single else probs

    def classify(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities, predicted labels); ties resolve to Healthy."""
        xb, single = _as_batch(x)
        probs = self.probabilities(xb)
        pred = (probs[:, POSITIVE] > probs[:, HEALTHY]).astype(np.int64)
        if single:
            return probs[0], int(pred[0])
        return probs, pred


class Encoder:
    """Dense image-to-latent map; the label is not an input."""

    def __init__(self, mlp: nn.Mlp, config: ModelConfig):
        self.mlp = mlp
        self.config = config

    def encode(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        w = self.mlp.forward(np.asarray(xb, dtype=self.mlp.layers[0].weight.dtype))
        return w[0] if single else w


class Generator:
    """Conditional style generator; see the module docstring for the math."""

    def __init__(
        self,
        config: ModelConfig,
        mapping: nn.Mlp,
        affine_weights: list[np.ndarray],
        affine_biases: list[np.ndarray],
        synth_weights: list[np.ndarray],
        synth_biases: list[np.ndarray],
        const: np.ndarray,
        out_weight: np.ndarray,
        out_bias: np.ndarray,
        embedding: np.ndarray,
    ):
        self.config = config
        self.mapping = mapping
        self.affine_weights = affine_weights
        self.affine_biases = affine_biases
        self.synth_weights = synth_weights
        self.synth_biases = synth_biases
        self.const = const
        self.out_weight = out_weight
        self.out_bias = out_bias
        self.embedding = embedding

    # --- label conditioning ---

    def embed(self, y: np.ndarray) -> np.ndarray:
        return self.embedding[np.asarray(y, dtype=np.int64)]

    def map_latent(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Noise-path latent: w = mapping([z, embed(y)])."""
        zb, single = _as_batch(z)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        w = self.mapping.forward(
            np.concatenate([zb.astype(self.embedding.dtype), self.embed(yb)], axis=1)
        )
        return w[0] if single else w

    # --- styles ---

    def style_of(self, w: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Concatenated per-stage styles s_l = A_l [w, embed(y)] + b_l."""
        wb, single = _as_batch(w)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        inp = np.concatenate([wb.astype(self.embedding.dtype), self.embed(yb)], axis=1)
        parts = [
            inp @ a.T + b for a, b in zip(self.affine_weights, self.affine_biases)
        ]
        s = np.concatenate(parts, axis=1)
        return s[0] if single else s

    def split_styles(self, s: np.ndarray) -> list[np.ndarray]:
        out, pos = [], 0
        for ch in self.config.stage_channels:
            out.append(s[:, pos : pos + ch])
            pos += ch
        return out

    # --- synthesis ---

    def synthesize(self, s: np.ndarray) -> np.ndarray:
        """Image from explicit styles, bypassing the affines."""
        return self.synth_cached(s)[0]

    def synth_cached(self, s: np.ndarray):
        sb, single = _as_batch(s)
        if sb.shape[1] != self.config.style_dim:
            raise nn.ShapeError(
                f"style vector length {sb.shape[1]} != {self.config.style_dim}"
            )
        sb = sb.astype(self.const.dtype, copy=False)
        stage_styles = self.split_styles(sb)
        h = np.broadcast_to(self.const, (sb.shape[0], self.const.shape[0]))
        cache = []
        for s_l, w_l, c_l in zip(stage_styles, self.synth_weights, self.synth_biases):
            mod = h * s_l
            pre = mod @ w_l.T + c_l
            h_next = nn.leaky_relu(pre)
            cache.append((h, s_l, mod, pre))
            h = h_next
        out_pre = h @ self.out_weight.T + self.out_bias
        img = nn.sigmoid(out_pre)
        cache.append((h, img))
        return (img[0] if single else img), cache

    def synth_backward(self, cache, d_img: np.ndarray):
        """Gradients of the cached synthesis: returns (grads dict, d_styles)."""
        h_last, img = cache[-1]
        d_pre_out = d_img * img * (1.0 - img)
        grads = {
            "synth.out.weight": d_pre_out.T @ h_last,
            "synth.out.bias": d_pre_out.sum(axis=0),
        }
        d_h = d_pre_out @ self.out_weight
        d_styles = []
        for l in reversed(range(len(self.synth_weights))):
            h_in, s_l, mod, pre = cache[l]
            d_pre = d_h * np.where(pre >= 0, pre.dtype.type(1.0), pre.dtype.type(nn.LEAKY_SLOPE))
            grads[f"synth.{l}.weight"] = d_pre.T @ mod
            grads[f"synth.{l}.bias"] = d_pre.sum(axis=0)
            d_mod = d_pre @ self.synth_weights[l]
            d_styles.append(d_mod * h_in)
            d_h = d_mod * s_l
        grads["synth.const"] = d_h.sum(axis=0)  # d wrt the broadcast constant
        d_s = np.concatenate(list(reversed(d_styles)), axis=1)
        return grads, d_s

    def style_backward(self, w: np.ndarray, y: np.ndarray, d_s: np.ndarray):
        """Gradients of style_of: returns (grads dict incl. embedding, d_w)."""
        wb, _ = _as_batch(w)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        inp = np.concatenate([wb.astype(self.embedding.dtype), self.embed(yb)], axis=1)
        wd = self.config.w_dim
        grads: dict[str, np.ndarray] = {}
        d_w = np.zeros(wb.shape, dtype=self.embedding.dtype)
        d_emb_rows = np.zeros((wb.shape[0], self.config.embed_dim), dtype=self.embedding.dtype)
        for l, part in enumerate(self.split_styles(d_s)):
            grads[f"affine.{l}.weight"] = part.T @ inp
            grads[f"affine.{l}.bias"] = part.sum(axis=0)
            d_w += part @ self.affine_weights[l][:, :wd]
            d_emb_rows += part @ self.affine_weights[l][:, wd:]
        d_embed = np.zeros_like(self.embedding)
        np.add.at(d_embed, yb, d_emb_rows)
        grads["embed"] = d_embed
        return grads, d_w

    # --- the two public image entry points ---

    def generate_from_w(self, w: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.synthesize(self.style_of(w, y))

    def generate_from_styles(self, s: np.ndarray) -> np.ndarray:
        return self.synthesize(s)

    # --- parameter plumbing ---

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.mapping.layers)):
            names += [f"mapping.{i}.weight", f"mapping.{i}.bias"]
        for l in range(len(self.affine_weights)):
            names += [f"affine.{l}.weight", f"affine.{l}.bias"]
        names.append("synth.const")
        for l in range(len(self.synth_weights)):
            names += [f"synth.{l}.weight", f"synth.{l}.bias"]
        names += ["synth.out.weight", "synth.out.bias", "embed"]
        return names

    def parameters(self) -> list[np.ndarray]:
        out = list(self.mapping.parameters())
        for a, b in zip(self.affine_weights, self.affine_biases):
            out += [a, b]
        out.append(self.const)
        for w, c in zip(self.synth_weights, self.synth_biases):
            out += [w, c]
        out += [self.out_weight, self.out_bias, self.embedding]
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        n_map = 2 * len(self.mapping.layers)
        self.mapping.set_parameters(params[:n_map])
        pos = n_map
        for l in range(len(self.affine_weights)):
            self.affine_weights[l] = params[pos]
            self.affine_biases[l] = params[pos + 1]
            pos += 2
        self.const = params[pos]
        pos += 1
        for l in range(len(self.synth_weights)):
            self.synth_weights[l] = params[pos]
            self.synth_biases[l] = params[pos + 1]
            pos += 2
        self.out_weight, self.out_bias, self.embedding = params[pos : pos + 3]


def build_classifier(config: ModelConfig, rng: Rng) -> Classifier:
    dims = [config.pixels, *config.classifier_hidden, NUM_CLASSES]
    return Classifier(_build_mlp(rng, dims), config)


def build_encoder(config: ModelConfig, rng: Rng) -> Encoder:
    dims = [config.pixels, *config.encoder_hidden, config.w_dim]
    return Encoder(_build_mlp(rng, dims), config)


def build_generator(config: ModelConfig, rng: Rng) -> Generator:
    in_dim = config.w_dim + config.embed_dim
    mapping = _build_mlp(rng, [config.z_dim + config.embed_dim, *config.mapping_hidden, config.w_dim])
    aff_w, aff_b, syn_w, syn_b = [], [], [], []
    prev_ch = config.stage_channels[0]
    for ch in config.stage_channels:
        a = (rng.normal(size=ch * in_dim) / np.sqrt(in_dim)).reshape(ch, in_dim)
        aff_w.append(a.astype(np.float32))
        aff_b.append(np.ones(ch, dtype=np.float32))  # styles start near identity
        w = (rng.normal(size=ch * prev_ch) * np.sqrt(2.0 / prev_ch)).reshape(ch, prev_ch)
        syn_w.append(w.astype(np.float32))
        syn_b.append(np.zeros(ch, dtype=np.float32))
        prev_ch = ch
    const = np.ones(config.stage_channels[0], dtype=np.float32)
    out_w = (rng.normal(size=config.pixels * prev_ch) / np.sqrt(prev_ch)).reshape(
        config.pixels, prev_ch
    ).astype(np.float32)
    out_b = np.zeros(config.pixels, dtype=np.float32)
    embed = (rng.normal(size=NUM_CLASSES * config.embed_dim) * 0.5).reshape(
        NUM_CLASSES, config.embed_dim
    ).astype(np.float32)
    return Generator(
        config, mapping, aff_w, aff_b, syn_w, syn_b, const, out_w, out_b, embed
    )


@dataclass
class ModelBundle:
    """The trained stack persisted as one weight file."""

    classifier: Classifier
    generator: Generator
    encoder: Encoder
    config: ModelConfig

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.classifier.mlp.layers):
            tensors[f"classifier.{i}.weight"] = layer.weight
            tensors[f"classifier.{i}.bias"] = layer.bias
        for i, layer in enumerate(self.encoder.mlp.layers):
            tensors[f"encoder.{i}.weight"] = layer.weight
            tensors[f"encoder.{i}.bias"] = layer.bias
        g = self.generator
        for name, arr in zip(g.param_names(), g.parameters()):
            tensors[name] = arr
        return tensors

    def to_bytes(self) -> bytes:
        return save_weights(self.to_tensors())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        from pathlib import Path

        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def from_tensors(tensors: dict[str, np.ndarray]) -> "ModelBundle":
        config = _infer_config(tensors)
        classifier = Classifier(_mlp_from_tensors(tensors, "classifier"), config)
        encoder = Encoder(_mlp_from_tensors(tensors, "encoder"), config)
        n_stages = len(config.stage_channels)
        generator = Generator(
            config,
            _mlp_from_tensors(tensors, "mapping"),
            [tensors[f"affine.{l}.weight"].copy() for l in range(n_stages)],
            [tensors[f"affine.{l}.bias"].copy() for l in range(n_stages)],
            [tensors[f"synth.{l}.weight"].copy() for l in range(n_stages)],
            [tensors[f"synth.{l}.bias"].copy() for l in range(n_stages)],
            tensors["synth.const"].copy(),
            tensors["synth.out.weight"].copy(),
            tensors["synth.out.bias"].copy(),
            tensors["embed"].copy(),
        )
        return ModelBundle(classifier, generator, encoder, config)

    @staticmethod
    def from_bytes(data: bytes) -> "ModelBundle":
        return ModelBundle.from_tensors(load_weights(data))

    @staticmethod
    def load(path) -> "ModelBundle":
        from pathlib import Path

        return ModelBundle.from_bytes(Path(path).read_bytes())


def _layer_indices(tensors: dict[str, np.ndarray], prefix: str) -> list[int]:
    idx = set()
    for name in tensors:
        parts = name.split(".")
        if parts[0] == prefix and len(parts) == 3 and parts[1].isdigit():
            idx.add(int(parts[1]))
    return sorted(idx)


def _mlp_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> nn.Mlp:
    layers = []
    indices = _layer_indices(tensors, prefix)
    for i in indices:
        act = nn.IDENTITY if i == indices[-1] else nn.LEAKY_RELU
        layers.append(
            nn.DenseLayer(
                tensors[f"{prefix}.{i}.weight"].copy(),
                tensors[f"{prefix}.{i}.bias"].copy(),
                act,
            )
        )
    return nn.Mlp(layers)


def _infer_config(tensors: dict[str, np.ndarray]) -> ModelConfig:
    """All dimensions are recoverable from tensor shapes."""
    embed_dim = tensors["embed"].shape[1]
    stages = _layer_indices(tensors, "affine")
    stage_channels = tuple(tensors[f"affine.{l}.weight"].shape[0] for l in stages)
    w_dim = tensors["affine.0.weight"].shape[1] - embed_dim
    z_dim = tensors["mapping.0.weight"].shape[1] - embed_dim
    pixels = tensors["synth.out.weight"].shape[0]
    image_size = int(round(np.sqrt(pixels)))
    mapping_hidden = tuple(
        tensors[f"mapping.{i}.weight"].shape[0]
        for i in _layer_indices(tensors, "mapping")[:-1]
    )
    classifier_hidden = tuple(
        tensors[f"classifier.{i}.weight"].shape[0]
        for i in _layer_indices(tensors, "classifier")[:-1]
    )
    encoder_hidden = tuple(
        tensors[f"encoder.{i}.weight"].shape[0]
        for i in _layer_indices(tensors, "encoder")[:-1]
    )
    return ModelConfig(
        image_size=image_size,
        z_dim=z_dim,
        w_dim=w_dim,
        embed_dim=embed_dim,
        stage_channels=stage_channels,
        mapping_hidden=mapping_hidden,
        classifier_hidden=classifier_hidden,
        encoder_hidden=encoder_hidden,
    )
