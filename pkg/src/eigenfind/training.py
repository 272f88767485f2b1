"""Training loops for the frozen classifier and the generator/encoder pair.

The generator and encoder train jointly: every iteration processes one
encoded half-batch (reconstruction L1 plus a KL term holding the
classifier's view of the reconstruction to its view of the input) and one
noise half-batch (cross-entropy of the classifier on images generated
from mapped noise, against the sampled conditioning label). The
classifier provides gradients through its input but its weights never
move; a checksum before and after proves it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .models import (
    Classifier,
    Encoder,
    Generator,
    ModelConfig,
    build_classifier,
    build_encoder,
    build_generator,
)
from .rng import Rng, derive_seed
from .weights import save_weights


class ConfigurationError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    classifier_lr: float = 1e-3
    generator_lr: float = 0.0016
    encoder_lr: float = 0.002
    iterations: int = 5000
    lambda_rec: float = 1.0
    lambda_cls: float = 0.01
    seed: int = 0
    eval_every: int = 100

    def validate(self) -> None:
        numeric = {
            "batch_size": self.batch_size,
            "classifier_lr": self.classifier_lr,
            "generator_lr": self.generator_lr,
            "encoder_lr": self.encoder_lr,
            "iterations": self.iterations,
            "eval_every": self.eval_every,
        }
        for name, value in numeric.items():
            if value <= 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lambda_rec < 0 or self.lambda_cls < 0:
            raise ConfigurationError("loss weights must be >= 0")


def _classifier_checksum(classifier: Classifier) -> str:
    tensors = {}
    for i, layer in enumerate(classifier.mlp.layers):
        tensors[f"classifier.{i}.weight"] = layer.weight
        tensors[f"classifier.{i}.bias"] = layer.bias
    return hashlib.sha256(save_weights(tensors)).hexdigest()


def _index_stream(n: int, rng: Rng):
    while True:
        yield from rng.permutation(n)


def _take(stream, count: int) -> np.ndarray:
    return np.fromiter(itertools.islice(stream, count), dtype=np.int64, count=count)


def _write_log(log_path, entries) -> None:
    if log_path is None:
        return
    with open(Path(log_path), "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def train_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    log_path=None,
) -> tuple[Classifier, list[dict]]:
    """Cross-entropy training with Adam; stops early at 0.99 train accuracy."""
    config.validate()
    model_config = model_config or ModelConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("classifier training needs both classes present")

    clf = build_classifier(model_config, Rng(derive_seed(config.seed, 1)))
    params = clf.mlp.parameters()
    adam = nn.AdamState.for_params(params, config.classifier_lr)
    stream = _index_stream(len(images), Rng(derive_seed(config.seed, 2)))

    log: list[dict] = []
    for it in range(1, config.iterations + 1):
        idx = _take(stream, config.batch_size)
        logits, cache = clf.mlp.forward_cached(images[idx])
        loss, d_logits = nn.cross_entropy(logits, labels[idx])
        grad_pairs, _ = clf.mlp.backward(cache, d_logits)
        grads = [g for pair in grad_pairs for g in pair]
        params, adam = adam_step_and_apply(clf.mlp, params, grads, adam)

        if it % config.eval_every == 0 or it == config.iterations:
            _, preds = clf.classify(images)
            acc = float((preds == labels).mean())
            log.append({"iteration": it, "loss": loss, "train_accuracy": acc})
            if acc >= 0.99:
                break
    _write_log(log_path, log)
    return clf, log


def adam_step_and_apply(mlp: nn.Mlp, params, grads, adam):
    params, adam = nn.adam_step(params, grads, adam)
    mlp.set_parameters(params)
    return params, adam


def _generator_grad_zeros(gen: Generator) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in zip(gen.param_names(), gen.parameters())}


def _accumulate(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        into[name] += g


def train_generator_encoder(
    images: np.ndarray,
    classifier: Classifier,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    log_path=None,
) -> tuple[Generator, Encoder, list[dict]]:
    """Joint reconstruction + classifier-consistency training.

    Per iteration: an encoded half-batch with loss
    lambda_rec * L1(x, G(E(x), y)) + lambda_cls * KL(C(x) || C(G(E(x), y)))
    where y = argmax C(x), and a noise half-batch with loss
    lambda_cls * CE(C(G(map(z, y), y)), y) with z standard normal and y
    uniform. One Adam step per iteration for each of generator and encoder.
    """
    config.validate()
    model_config = model_config or ModelConfig()
    images = np.asarray(images, dtype=np.float32)
    half = config.batch_size // 2
    pixels = model_config.pixels

    frozen_before = _classifier_checksum(classifier)
    init_rng = Rng(derive_seed(config.seed, 3))
    gen = build_generator(model_config, init_rng)
    enc = build_encoder(model_config, init_rng)

    gen_params = gen.parameters()
    gen_adam = nn.AdamState.for_params(gen_params, config.generator_lr)
    enc_params = enc.mlp.parameters()
    enc_adam = nn.AdamState.for_params(enc_params, config.encoder_lr)

    stream = _index_stream(len(images), Rng(derive_seed(config.seed, 4)))
    noise_rng = Rng(derive_seed(config.seed, 5))
    names = gen.param_names()

    log: list[dict] = []
    for it in range(1, config.iterations + 1):
        gen_grads = _generator_grad_zeros(gen)

        # --- encoded half-batch ---
        xb = images[_take(stream, half)]
        probs_x, y_pred = classifier.classify(xb)
        w, enc_cache = enc.mlp.forward_cached(xb)
        styles = gen.style_of(w, y_pred)
        recon, syn_cache = gen.synth_cached(styles)

        diff = recon - xb
        loss_rec = float(np.abs(diff, dtype=np.float64).mean())
        d_img = (config.lambda_rec / (half * pixels)) * np.sign(diff)

        cls_logits, cls_cache = classifier.mlp.forward_cached(recon)
        q = nn.softmax(cls_logits)
        loss_kl, _ = nn.kl_divergence(probs_x.astype(np.float32), q)
        # dKL/dlogits = q - p exactly; backprop in logit space stays finite
        # even where q underflows against a confident classifier
        d_cls_logits = (config.lambda_cls / half) * (q - probs_x.astype(q.dtype))
        _, d_img_kl = classifier.mlp.backward(cls_cache, d_cls_logits)
        d_img = d_img.astype(np.float32) + d_img_kl

        syn_grads, d_styles = gen.synth_backward(syn_cache, d_img)
        _accumulate(gen_grads, syn_grads)
        aff_grads, d_w = gen.style_backward(w, y_pred, d_styles)
        _accumulate(gen_grads, aff_grads)
        enc_grad_pairs, _ = enc.mlp.backward(enc_cache, d_w)

        # --- noise half-batch ---
        z = noise_rng.normal(size=half * model_config.z_dim).reshape(half, -1)
        y_noise = (noise_rng.fill_u64(half) & np.uint64(1)).astype(np.int64)
        map_in = np.concatenate(
            [z.astype(np.float32), gen.embed(y_noise)], axis=1
        )
        w_n, map_cache = gen.mapping.forward_cached(map_in)
        styles_n = gen.style_of(w_n, y_noise)
        img_n, syn_cache_n = gen.synth_cached(styles_n)
        logits_n, cls_cache_n = classifier.mlp.forward_cached(img_n)
        loss_ce, d_logits_n = nn.cross_entropy(logits_n, y_noise)
        _, d_img_n = classifier.mlp.backward(cls_cache_n, config.lambda_cls * d_logits_n)

        syn_grads_n, d_styles_n = gen.synth_backward(syn_cache_n, d_img_n)
        _accumulate(gen_grads, syn_grads_n)
        aff_grads_n, d_w_n = gen.style_backward(w_n, y_noise, d_styles_n)
        _accumulate(gen_grads, aff_grads_n)
        map_grad_pairs, d_map_in = gen.mapping.backward(map_cache, d_w_n)
        for i, (dw_, db_) in enumerate(map_grad_pairs):
            gen_grads[f"mapping.{i}.weight"] += dw_
            gen_grads[f"mapping.{i}.bias"] += db_
        d_embed_noise = np.zeros_like(gen.embedding)
        np.add.at(d_embed_noise, y_noise, d_map_in[:, model_config.z_dim :])
        gen_grads["embed"] += d_embed_noise

        gen_params, gen_adam = nn.adam_step(
            gen_params, [gen_grads[name] for name in names], gen_adam
        )
        gen.set_parameters(gen_params)
        enc_grads = [g for pair in enc_grad_pairs for g in pair]
        enc_params, enc_adam = adam_step_and_apply(enc.mlp, enc_params, enc_grads, enc_adam)

        if it % config.eval_every == 0 or it == config.iterations:
            log.append(
                {
                    "iteration": it,
                    "loss_rec": loss_rec,
                    "loss_kl": loss_kl,
                    "loss_noise_ce": loss_ce,
                }
            )

    if _classifier_checksum(classifier) != frozen_before:
        raise FrozenModelError("classifier weights changed during generator training")
    _write_log(log_path, log)
    return gen, enc, log


def evaluate_generator(
    classifier: Classifier,
    generator: Generator,
    encoder: Encoder,
    images: np.ndarray,
) -> dict:
    """Held-out reconstruction L1 and label consistency of G(E(x), y)."""
    images = np.asarray(images, dtype=np.float32)
    _, y = classifier.classify(images)
    w = encoder.encode(images)
    recon = generator.generate_from_w(w, y)
    l1 = float(np.abs(recon.astype(np.float64) - images).mean())
    _, y_recon = classifier.classify(recon)
    consistency = float((y_recon == y).mean())
    return {"recon_l1": l1, "label_consistency": consistency}


def evaluate_classifier(classifier: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    _, preds = classifier.classify(np.asarray(images, dtype=np.float32))
    return float((preds == np.asarray(labels)).mean())
