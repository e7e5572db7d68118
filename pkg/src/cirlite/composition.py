"""Composition blocks that merge reference-image and query-text features.

Two building blocks:

  * `modify` — rewrites the reference tokens conditioned on the query
    tokens: per-stream self-attention (pyramid-pooled when the stream is
    visual), bidirectional cross-attention where each stream queries the
    other, then a query-conditioned soft gate over the reference stream
    and a residual feed-forward. Output conforms to the reference stream.
  * `absorb` — injects a local-level token matrix into a global-level one
    of the same length: per-stream self-attention, cross-attention with
    queries from the global stream, a gelu mix of the attended result
    concatenated with the global stream, then a residual feed-forward.

`compose_query` chains them bottom-up (local modify -> absorb into the
reference's global features -> global modify with the sentence-level
text); `fuse_target` runs a single absorb over a target image's bundle.
Cross-attention uses pyramid pooling on the key side exactly when the
key/value stream is visual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .attention import (
    AttentionParams,
    PyramidConfig,
    cross_attention,
    init_attention,
    pyramid_self_attention,
    self_attention,
    soft_gate,
)
from .autodiff import Tensor
from .encoders import FeatureBundle

STAGES = ("local_composition", "absorbing", "global_composition", "target_fusion")


@dataclass
class Tagged:
    """A token matrix annotated with its modality (and grid when visual)."""

    tokens: Tensor
    modality: str
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            raise ValueError("tagged input must wrap a Tensor")
        if self.modality not in ("visual", "textual"):
            raise ValueError(f"unknown modality tag {self.modality!r}")
        if self.modality == "visual":
            if self.grid is None or self.grid[0] * self.grid[1] != self.tokens.shape[0]:
                raise ValueError(
                    f"visual input needs a grid matching {self.tokens.shape[0]} tokens")


def visual(tokens: Tensor, grid: tuple[int, int]) -> Tagged:
    return Tagged(tokens, "visual", grid)


def textual(tokens: Tensor) -> Tagged:
    return Tagged(tokens, "textual")


@dataclass
class ComposedEmbedding:
    tokens: Tensor
    stage: str
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not np.all(np.isfinite(self.tokens.data)):
            raise ValueError(f"non-finite values in {self.stage} output")


@dataclass
class ModifyBlockParams:
    self_ref: AttentionParams
    self_qry: AttentionParams
    ln_ref1: ly.LayerNormParams
    ln_qry1: ly.LayerNormParams
    cross_ref: AttentionParams   # reference stream attends into the query stream
    cross_qry: AttentionParams   # query stream attends into the reference stream
    ln_ref2: ly.LayerNormParams
    ln_qry2: ly.LayerNormParams
    gate: Tensor
    ln_out: ly.LayerNormParams
    ff: ly.MlpParams


@dataclass
class AbsorbBlockParams:
    self_local: AttentionParams
    self_global: AttentionParams
    ln_local1: ly.LayerNormParams
    ln_global1: ly.LayerNormParams
    cross: AttentionParams       # global stream attends into the local stream
    mix: ly.LinearParams         # concat width 2d -> d
    ln_out: ly.LayerNormParams
    ff: ly.MlpParams


@dataclass
class ComposerParams:
    modify_local: ModifyBlockParams
    absorb_mid: AbsorbBlockParams
    modify_global: ModifyBlockParams
    absorb_target: AbsorbBlockParams
    n_p: int = 3


def _require_tag(x, name: str) -> Tagged:
    if not isinstance(x, Tagged):
        raise ValueError(f"{name} is missing its modality tag (wrap it with visual/textual)")
    return x


def _pyramid_of(x: Tagged, n_p: int) -> PyramidConfig | None:
    """Pyramid configuration when the tokens are spatial, else None."""
    if x.modality == "visual":
        return PyramidConfig(n_p, *x.grid)
    return None


def _self_attend(x: Tagged, params: AttentionParams, ln: ly.LayerNormParams,
                 n_p: int) -> Tensor:
    cfg = _pyramid_of(x, n_p)
    if cfg is not None:
        attended, _ = pyramid_self_attention(x.tokens, params, cfg)
    else:
        attended = self_attention(x.tokens, params)
    return ly.layer_norm(ad.add(x.tokens, attended), ln)


def modify(reference, query, params: ModifyBlockParams, n_p: int,
           stage: str = "local_composition") -> ComposedEmbedding:
    reference = _require_tag(reference, "reference")
    query = _require_tag(query, "query")
    if reference.tokens.shape[1] != query.tokens.shape[1]:
        raise ValueError(
            f"feature widths differ: reference {reference.tokens.shape} "
            f"vs query {query.tokens.shape}")

    r_hat = _self_attend(reference, params.self_ref, params.ln_ref1, n_p)
    q_hat = _self_attend(query, params.self_qry, params.ln_qry1, n_p)

    to_ref, _ = cross_attention(r_hat, q_hat, params.cross_ref,
                                _pyramid_of(query, n_p))
    r_bar = ly.layer_norm(ad.add(r_hat, to_ref), params.ln_ref2)
    to_qry, _ = cross_attention(q_hat, r_hat, params.cross_qry,
                                _pyramid_of(reference, n_p))
    q_bar = ly.layer_norm(ad.add(q_hat, to_qry), params.ln_qry2)

    gated = soft_gate(q_bar, r_bar, params.gate)
    merged = ly.layer_norm(ad.add(r_bar, gated), params.ln_out)
    return ComposedEmbedding(tokens=ly.residual_mlp(merged, params.ff),
                             stage=stage, grid=reference.grid)


def absorb(local, global_, params: AbsorbBlockParams, n_p: int,
           stage: str = "absorbing") -> ComposedEmbedding:
    local = _require_tag(local, "local")
    global_ = _require_tag(global_, "global")
    if local.tokens.shape[1] != global_.tokens.shape[1]:
        raise ValueError(
            f"feature widths differ: local {local.tokens.shape} "
            f"vs global {global_.tokens.shape}")
    if local.tokens.shape[0] != global_.tokens.shape[0]:
        raise ValueError(
            f"token counts differ: local {local.tokens.shape} "
            f"vs global {global_.tokens.shape} (inputs are not resampled)")

    l_hat = _self_attend(local, params.self_local, params.ln_local1, n_p)
    g_hat = _self_attend(global_, params.self_global, params.ln_global1, n_p)

    attended, _ = cross_attention(g_hat, l_hat, params.cross,
                                  _pyramid_of(local, n_p))
    mixed = ad.gelu(ly.linear(ad.concat([attended, g_hat], axis=1), params.mix))
    merged = ly.layer_norm(ad.add(g_hat, mixed), params.ln_out)
    return ComposedEmbedding(tokens=ly.residual_mlp(merged, params.ff),
                             stage=stage, grid=global_.grid)


def compose_query(ref: FeatureBundle, qry: FeatureBundle,
                  params: ComposerParams) -> ComposedEmbedding:
    """Bottom-up composition of a reference image bundle and a text bundle."""
    if ref.modality != "visual" or qry.modality != "textual":
        raise ValueError(
            f"compose_query expects (visual, textual), got ({ref.modality}, {qry.modality})")
    local = modify(visual(ref.local, ref.grid), textual(qry.local),
                   params.modify_local, params.n_p, "local_composition")
    absorbed = absorb(visual(local.tokens, ref.grid), visual(ref.global_, ref.grid),
                      params.absorb_mid, params.n_p, "absorbing")
    return modify(visual(absorbed.tokens, ref.grid), textual(qry.global_),
                  params.modify_global, params.n_p, "global_composition")


def fuse_target(tgt: FeatureBundle, params: ComposerParams) -> ComposedEmbedding:
    """Broadcast a target image's local details into its global features."""
    if tgt.modality != "visual":
        raise ValueError(f"fuse_target expects a visual bundle, got {tgt.modality}")
    return absorb(visual(tgt.local, tgt.grid), visual(tgt.global_, tgt.grid),
                  params.absorb_target, params.n_p, "target_fusion")


def pool(e: ComposedEmbedding) -> Tensor:
    """Mean over tokens, L2-normalized — the vector used for retrieval."""
    if e.tokens.shape[0] < 1:
        raise ValueError("cannot pool an empty embedding")
    return ad.l2_normalize(ad.mean(e.tokens, axis=0))


def pool_rows(tokens: Tensor) -> Tensor:
    """Same reduction for raw feature matrices (e.g. text global features)."""
    return ad.l2_normalize(ad.mean(tokens, axis=0))


# -- initialization ------------------------------------------------------------


def init_modify_block(rng: np.random.Generator, d: int, heads: int) -> ModifyBlockParams:
    return ModifyBlockParams(
        self_ref=init_attention(rng, d, heads),
        self_qry=init_attention(rng, d, heads),
        ln_ref1=ly.init_layer_norm(d),
        ln_qry1=ly.init_layer_norm(d),
        cross_ref=init_attention(rng, d, heads),
        cross_qry=init_attention(rng, d, heads),
        ln_ref2=ly.init_layer_norm(d),
        ln_qry2=ly.init_layer_norm(d),
        gate=Tensor(rng.standard_normal((d, d)) * ly.INIT_SCALE, requires_grad=True),
        ln_out=ly.init_layer_norm(d),
        ff=ly.init_mlp(rng, d, 2 * d),
    )


def init_absorb_block(rng: np.random.Generator, d: int, heads: int) -> AbsorbBlockParams:
    return AbsorbBlockParams(
        self_local=init_attention(rng, d, heads),
        self_global=init_attention(rng, d, heads),
        ln_local1=ly.init_layer_norm(d),
        ln_global1=ly.init_layer_norm(d),
        cross=init_attention(rng, d, heads),
        mix=ly.init_linear(rng, 2 * d, d),
        ln_out=ly.init_layer_norm(d),
        ff=ly.init_mlp(rng, d, 2 * d),
    )


def init_composer(rng: np.random.Generator, d: int, heads: int, n_p: int = 3) -> ComposerParams:
    return ComposerParams(
        modify_local=init_modify_block(rng, d, heads),
        absorb_mid=init_absorb_block(rng, d, heads),
        modify_global=init_modify_block(rng, d, heads),
        absorb_target=init_absorb_block(rng, d, heads),
        n_p=n_p,
    )
