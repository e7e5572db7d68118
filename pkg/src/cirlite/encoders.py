"""Two-level (local, global) feature extraction for images and texts.

Both encoders are small trainable post-norm transformer stacks. The
contract is a `FeatureBundle`: a local matrix built from the first
layer's output and a global matrix projected from the last layer's, both
[N, d]. Image tokens are flattened pixel patches with no position
embeddings — spatial structure enters later through pyramid pooling, so
the visual encoder itself stays permutation-equivariant. Text tokens get
learned position embeddings added at the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    depth: int = 2
    d: int = 32
    heads: int = 4
    patch: int = 4
    vocab_size: int = 32
    max_len: int = 16

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2 (distinct first and last layer), got {self.depth}")
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if min(self.patch, self.vocab_size, self.max_len) < 1:
            raise ValueError("patch, vocab_size and max_len must be positive")


@dataclass
class PatchGrid:
    grid_h: int
    grid_w: int
    patch_dim: int
    patches: Tensor  # [grid_h * grid_w, patch_dim]


@dataclass(frozen=True)
class TokenSequence:
    """Token ids including the start/end markers at the ends."""

    token_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.token_ids) < 2:
            raise ValueError("a token sequence needs at least start and end markers")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def content(self) -> tuple[int, ...]:
        """Ids between the start and end markers."""
        return self.token_ids[1:-1]


@dataclass
class FeatureBundle:
    local: Tensor       # [N, d]
    global_: Tensor     # [N, d]
    modality: str       # "visual" | "textual"
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.local.shape != self.global_.shape:
            raise ValueError(
                f"local {self.local.shape} and global {self.global_.shape} must match")
        if self.modality not in ("visual", "textual"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "visual":
            if self.grid is None or self.grid[0] * self.grid[1] != self.local.shape[0]:
                raise ValueError("visual bundles need a grid matching the token count")
        if not (np.all(np.isfinite(self.local.data)) and np.all(np.isfinite(self.global_.data))):
            raise ValueError("feature bundle contains non-finite values")


@dataclass
class VisualEncoderParams:
    embed: ly.LinearParams                       # patch_dim -> d
    stack: list[ly.TransformerLayerParams] = field(default_factory=list)
    local_head: ly.MlpParams = None              # nonlinear projection of layer-1 output
    global_head: ly.LinearParams = None          # linear projection of last layer


@dataclass
class TextEncoderParams:
    token_table: Tensor                          # [vocab, d]
    pos_table: Tensor                            # [max_len, d]
    stack: list[ly.TransformerLayerParams] = field(default_factory=list)
    global_head: ly.LinearParams = None


def patchify(image: Tensor | np.ndarray, patch: int) -> PatchGrid:
    """Slice an [H, W, C] image into non-overlapping patch rows.

    Patches are leaves: images never carry gradients, so the flattening
    runs in plain numpy for speed.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected an [H, W, C] image, got shape {img.shape}")
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    rows = np.empty((gh * gw, patch * patch * c))
    for r in range(gh):
        for col in range(gw):
            block = img[r * patch:(r + 1) * patch, col * patch:(col + 1) * patch, :]
            rows[r * gw + col] = block.reshape(-1)
    return PatchGrid(grid_h=gh, grid_w=gw, patch_dim=patch * patch * c, patches=Tensor(rows))


def unpatchify(grid: PatchGrid, patch: int, channels: int) -> np.ndarray:
    """Reassemble patch rows into the original [H, W, C] image."""
    gh, gw = grid.grid_h, grid.grid_w
    out = np.empty((gh * patch, gw * patch, channels))
    for r in range(gh):
        for col in range(gw):
            block = grid.patches.data[r * gw + col].reshape(patch, patch, channels)
            out[r * patch:(r + 1) * patch, col * patch:(col + 1) * patch, :] = block
    return out


def visual_encode(grid: PatchGrid, params: VisualEncoderParams) -> FeatureBundle:
    if grid.patch_dim != params.embed.w.shape[0]:
        raise ValueError(
            f"patch width {grid.patch_dim} does not match encoder input "
            f"width {params.embed.w.shape[0]}")
    x = ly.linear(grid.patches, params.embed)
    first = ly.transformer_layer(x, params.stack[0])
    h = first
    for layer in params.stack[1:]:
        h = ly.transformer_layer(h, layer)
    local = ly.mlp(first, params.local_head)
    global_ = ly.linear(h, params.global_head)
    return FeatureBundle(local=local, global_=global_, modality="visual",
                         grid=(grid.grid_h, grid.grid_w))


def text_encode(tokens: TokenSequence, params: TextEncoderParams) -> FeatureBundle:
    vocab = params.token_table.shape[0]
    bad = [t for t in tokens.token_ids if not 0 <= t < vocab]
    if bad:
        raise ValueError(f"token ids {bad} outside vocabulary of size {vocab}")
    m = len(tokens)
    if m > params.pos_table.shape[0]:
        raise ValueError(
            f"sequence length {m} exceeds maximum {params.pos_table.shape[0]}")
    embeds = ad.add(ad.embedding(params.token_table, tokens.token_ids),
                    ad.embedding(params.pos_table, range(m)))
    first = ly.transformer_layer(embeds, params.stack[0])
    h = first
    for layer in params.stack[1:]:
        h = ly.transformer_layer(h, layer)
    local = ad.add(first, embeds)
    global_ = ly.linear(h, params.global_head)
    return FeatureBundle(local=local, global_=global_, modality="textual")


def init_visual_encoder(rng: np.random.Generator, cfg: EncoderConfig,
                        channels: int = 3) -> VisualEncoderParams:
    patch_dim = cfg.patch * cfg.patch * channels
    return VisualEncoderParams(
        embed=ly.init_linear(rng, patch_dim, cfg.d),
        stack=[ly.init_transformer_layer(rng, cfg.d, cfg.heads) for _ in range(cfg.depth)],
        local_head=ly.init_mlp(rng, cfg.d, cfg.d),
        global_head=ly.init_linear(rng, cfg.d, cfg.d),
    )


def init_text_encoder(rng: np.random.Generator, cfg: EncoderConfig) -> TextEncoderParams:
    return TextEncoderParams(
        token_table=Tensor(rng.standard_normal((cfg.vocab_size, cfg.d)) * ly.INIT_SCALE,
                           requires_grad=True),
        pos_table=Tensor(rng.standard_normal((cfg.max_len, cfg.d)) * ly.INIT_SCALE,
                         requires_grad=True),
        stack=[ly.init_transformer_layer(rng, cfg.d, cfg.heads) for _ in range(cfg.depth)],
        global_head=ly.init_linear(rng, cfg.d, cfg.d),
    )
