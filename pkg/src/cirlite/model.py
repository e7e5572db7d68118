"""Full retrieval model: the two encoders, the composer stack, and the
reconstruction heads, plus checkpoint round-tripping.

Checkpoints store every parameter under its attribute path (e.g.
``composer.modify_local.cross_qry.wq``) together with the configuration
needed to rebuild an identically-shaped skeleton.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .composition import (
    ComposedEmbedding,
    ComposerParams,
    compose_query,
    fuse_target,
    init_composer,
    pool,
    pool_rows,
)
from .encoders import (
    EncoderConfig,
    FeatureBundle,
    TextEncoderParams,
    TokenSequence,
    VisualEncoderParams,
    init_text_encoder,
    init_visual_encoder,
    patchify,
    text_encode,
    visual_encode,
)
from .layers import named_tensors
from .losses import ReconstructionHeads, init_reconstruction_heads
from .tensorio import load_checkpoint, save_checkpoint


@dataclass
class ModelParams:
    visual: VisualEncoderParams
    text: TextEncoderParams
    composer: ComposerParams
    recon: ReconstructionHeads
    config: EncoderConfig
    channels: int = 3


def init_model(rng: np.random.Generator, cfg: EncoderConfig, n_p: int = 3,
               channels: int = 3) -> ModelParams:
    return ModelParams(
        visual=init_visual_encoder(rng, cfg, channels=channels),
        text=init_text_encoder(rng, cfg),
        composer=init_composer(rng, cfg.d, cfg.heads, n_p=n_p),
        recon=init_reconstruction_heads(rng, cfg.d),
        config=cfg,
        channels=channels,
    )


def encode_image(params: ModelParams, image: np.ndarray) -> FeatureBundle:
    return visual_encode(patchify(image, params.config.patch), params.visual)


def encode_text(params: ModelParams, tokens: TokenSequence) -> FeatureBundle:
    return text_encode(tokens, params.text)


def compose(params: ModelParams, reference: FeatureBundle,
            text: FeatureBundle) -> ComposedEmbedding:
    return compose_query(reference, text, params.composer)


def fuse(params: ModelParams, target: FeatureBundle) -> ComposedEmbedding:
    return fuse_target(target, params.composer)


def query_embedding(params: ModelParams, reference_image: np.ndarray,
                    tokens: TokenSequence) -> Tensor:
    """Pooled unit vector for a (reference image, modification text) query."""
    return pool(compose(params, encode_image(params, reference_image),
                        encode_text(params, tokens)))


def target_embedding(params: ModelParams, image: np.ndarray) -> Tensor:
    """Pooled unit vector a gallery image is indexed under."""
    return pool(fuse(params, encode_image(params, image)))


def text_global_pooled(text_bundle: FeatureBundle) -> Tensor:
    """Pooled global text features, the reconstruction target for the text side."""
    return pool_rows(text_bundle.global_)


def parameter_dict(params: ModelParams) -> dict[str, Tensor]:
    state = {}
    for holder, name in ((params.visual, "visual"), (params.text, "text"),
                         (params.composer, "composer"), (params.recon, "recon")):
        state.update(dict(named_tensors(holder, name)))
    return state


def save_model(path, params: ModelParams, extra_meta: dict | None = None) -> None:
    meta = {
        "config": asdict(params.config),
        "channels": params.channels,
        "n_p": params.composer.n_p,
    }
    if extra_meta:
        overlap = set(meta) & set(extra_meta)
        if overlap:
            raise ValueError(f"extra metadata shadows reserved keys {sorted(overlap)}")
        meta.update(extra_meta)
    save_checkpoint(path, {name: t.data for name, t in parameter_dict(params).items()},
                    meta)


def load_model(path) -> tuple[ModelParams, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["config"])
    params = init_model(np.random.default_rng(0), cfg, n_p=meta["n_p"],
                        channels=meta["channels"])
    skeleton = parameter_dict(params)
    if set(skeleton) != set(tensors):
        missing = sorted(set(skeleton) - set(tensors))[:3]
        surplus = sorted(set(tensors) - set(skeleton))[:3]
        raise ValueError(
            f"checkpoint does not match the model layout "
            f"(missing {missing}, surplus {surplus})")
    for name, tensor in skeleton.items():
        saved = tensors[name]
        if saved.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint entry {name} has shape {saved.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data[...] = saved
    return params, meta
