"""Small parameterized layers shared by the encoders and composition blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, init_attention
from .autodiff import Tensor

INIT_SCALE = 0.02


@dataclass
class LayerNormParams:
    scale: Tensor
    shift: Tensor


def layer_norm(x: Tensor, params: LayerNormParams) -> Tensor:
    return ad.layer_norm(x, params.scale, params.shift)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


def linear(x: Tensor, params: LinearParams) -> Tensor:
    return ad.add(ad.matmul(x, params.w), params.b)


@dataclass
class MlpParams:
    """Linear -> gelu -> Linear."""

    lin1: LinearParams
    lin2: LinearParams


def mlp(x: Tensor, params: MlpParams) -> Tensor:
    return ad.gelu_mlp(x, params.lin1.w, params.lin1.b, params.lin2.w, params.lin2.b)


def residual_mlp(x: Tensor, params: MlpParams) -> Tensor:
    """x + MLP(x); with zero weights this is the identity, which keeps the
    composition blocks' residual paths alive."""
    return ad.add(x, mlp(x, params))


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ff: MlpParams


def transformer_layer(x: Tensor, params: TransformerLayerParams) -> Tensor:
    from .attention import self_attention  # local import to avoid cycle at module load

    h = layer_norm(ad.add(x, self_attention(x, params.attn)), params.ln1)
    return layer_norm(ad.add(h, mlp(h, params.ff)), params.ln2)


# -- initialization ------------------------------------------------------------


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(
        scale=Tensor(np.ones(d), requires_grad=True),
        shift=Tensor(np.zeros(d), requires_grad=True),
    )


def init_linear(rng: np.random.Generator, d_in: int, d_out: int,
                scale: float = INIT_SCALE) -> LinearParams:
    return LinearParams(
        w=Tensor(rng.standard_normal((d_in, d_out)) * scale, requires_grad=True),
        b=Tensor(np.zeros(d_out), requires_grad=True),
    )


def init_mlp(rng: np.random.Generator, d: int, hidden: int,
             scale: float = INIT_SCALE) -> MlpParams:
    return MlpParams(lin1=init_linear(rng, d, hidden, scale),
                     lin2=init_linear(rng, hidden, d, scale))


def init_transformer_layer(rng: np.random.Generator, d: int, heads: int,
                           scale: float = INIT_SCALE) -> TransformerLayerParams:
    return TransformerLayerParams(
        attn=init_attention(rng, d, heads, scale),
        ln1=init_layer_norm(d),
        ln2=init_layer_norm(d),
        ff=init_mlp(rng, d, 2 * d, scale),
    )


# -- parameter traversal -------------------------------------------------------


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a tree of dataclasses / lists / dicts yielding (path, Tensor)."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for field in dataclasses.fields(obj):
            child = getattr(obj, field.name)
            yield from named_tensors(child, f"{prefix}.{field.name}" if prefix else field.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_tensors(child, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_tensors(obj[key], f"{prefix}.{key}")


def trainable_tensors(obj) -> list[tuple[str, Tensor]]:
    return [(name, t) for name, t in named_tensors(obj) if t.requires_grad]
