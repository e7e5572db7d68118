"""Training loop: decoupled-weight-decay Adam, linear warmup with cosine decay,
and the batched composition objective over mined counterfactual negatives.

Runs are deterministic given (config, seed): batch order, initialization, and
optimizer state all derive from seeded generators, and every step happens in a
single context.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, backward, scale, zero_grad
from .composition import pool
from .data import SyntheticDataset
from .encoders import EncoderConfig
from .losses import (
    LossWeights,
    MarginConfig,
    QueryForward,
    total_loss,
    triplet,
)
from .mining import (
    CounterfactualSet,
    MinerConfig,
    Query,
    TextEmbedder,
    mine_counterfactuals,
    read_sidecar,
    resolve_sidecar_record,
)
from .model import (
    ModelParams,
    compose,
    encode_image,
    encode_text,
    fuse,
    init_model,
    parameter_dict,
    save_model,
    text_global_pooled,
)

LOSS_VARIANTS = ("full", "triplet_only")
MINING_ENCODERS = ("frozen", "live")


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 30
    learning_rate: float = 3e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    loss_variant: str = "full"
    inline_mining: bool = False
    mining_encoder: str = "frozen"
    transport_eps: float = 0.05
    n_p: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    margins: MarginConfig = field(default_factory=MarginConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(
                f"batch size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.max_epochs < 1:
            raise ValueError(f"max epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be nonnegative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss variant must be one of {LOSS_VARIANTS}, "
                             f"got {self.loss_variant!r}")
        if self.transport_eps <= 0:
            raise ValueError("transport eps must be positive")
        if self.n_p < 1:
            raise ValueError("need at least one pyramid level")
        if self.mining_encoder not in MINING_ENCODERS:
            raise ValueError(f"mining encoder must be one of {MINING_ENCODERS}, "
                             f"got {self.mining_encoder!r}")
        if self.mining_encoder == "live" and not self.inline_mining:
            raise ValueError("mining_encoder='live' re-mines in-process every "
                             "epoch and needs inline_mining enabled")


_NESTED = {"weights": LossWeights, "margins": MarginConfig,
           "miner": MinerConfig, "encoder": EncoderConfig}


def config_to_json(config: TrainConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True, indent=2)


def config_from_json(text: str) -> TrainConfig:
    raw = json.loads(text)
    kwargs = {k: _NESTED[k](**v) if k in _NESTED else v for k, v in raw.items()}
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    return config_from_json(Path(path).read_text(encoding="utf-8"))


# -- optimizer ---------------------------------------------------------------------


class AdamW:
    """Adaptive-moment updates with weight decay applied directly to the
    parameters (decoupled from the gradient-based step)."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


def scheduled_lr(step: int, total_steps: int, peak: float,
                 warmup_fraction: float) -> float:
    """Linear ramp from 0 over the warmup span, then cosine decay to 0 at the
    final step. With warmup the first step runs at exactly 0 and the step at
    the end of warmup at exactly the peak."""
    if total_steps < 1:
        raise ValueError("schedule needs at least one step")
    warmup = int(warmup_fraction * total_steps)
    if warmup_fraction > 0:
        warmup = max(1, warmup)
    if step < warmup:
        return peak * step / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- data/config compatibility -------------------------------------------------------


def validate_compatibility(config_encoder: EncoderConfig, dataset: SyntheticDataset) -> None:
    side = dataset.spec.image_side
    if side % config_encoder.patch != 0:
        raise ValueError(
            f"image side {side} is not divisible by encoder patch {config_encoder.patch}")
    n_vocab = len(dataset.vocab.tokens)
    if n_vocab > config_encoder.vocab_size:
        raise ValueError(
            f"dataset vocabulary of {n_vocab} exceeds encoder table of "
            f"{config_encoder.vocab_size}")
    longest = max(len(q.text) for qs in dataset.splits.values() for q in qs)
    if longest > config_encoder.max_len:
        raise ValueError(
            f"dataset has a {longest}-token text but encoder max_len is "
            f"{config_encoder.max_len}")


# -- counterfactual plumbing ----------------------------------------------------------


def load_counterfactuals(sidecar_path, queries: list[Query]) -> dict[int, CounterfactualSet]:
    by_id = {q.query_id: q for q in queries}
    sets = {}
    for record in read_sidecar(sidecar_path):
        try:
            resolved = resolve_sidecar_record(record, by_id)
        except KeyError as e:
            raise ValueError(
                f"sidecar references query id {e.args[0]} absent from the split") from None
        sets[resolved.query_id] = resolved
    missing = sorted(set(by_id) - set(sets))
    if missing:
        raise ValueError(f"sidecar has no counterfactuals for query ids {missing[:5]}"
                         + ("..." if len(missing) > 5 else ""))
    return sets


def mine_inline(params: ModelParams, dataset: SyntheticDataset,
                miner: MinerConfig) -> dict[int, CounterfactualSet]:
    corpus = dataset.splits["train"]
    lex = dataset.vocab.lexicon()
    embedder = TextEmbedder(params.text)
    return {q.query_id: mine_counterfactuals(q, corpus, lex, miner, embedder)
            for q in corpus}


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    step_losses: list[float]
    epoch_losses: list[float]
    lr_curve: list[float]
    checkpoint_paths: list[Path]
    final_checkpoint: Path


class _BundleCache:
    """Per-step encoder reuse; every unique image / token sequence in a step
    is encoded once and its graph shared by all consumers."""

    def __init__(self, params: ModelParams, images: np.ndarray):
        self.params = params
        self.images = images
        self._image = {}
        self._text = {}

    def image(self, image_id: int):
        if image_id not in self._image:
            self._image[image_id] = encode_image(self.params, self.images[image_id])
        return self._image[image_id]

    def text(self, tokens):
        key = tokens.token_ids
        if key not in self._text:
            self._text[key] = encode_text(self.params, tokens)
        return self._text[key]


def _query_forward(params: ModelParams, cache: _BundleCache, q: Query,
                   counterfactuals: CounterfactualSet | None) -> QueryForward:
    text_bundle = cache.text(q.text)
    query_pooled = pool(compose(params, cache.image(q.reference_image_id), text_bundle))
    target_pooled = pool(fuse(params, cache.image(q.target_image_id)))
    negatives = []
    if counterfactuals is not None:
        variants = counterfactuals.ics + counterfactuals.tcs + counterfactuals.pcs
        for image_id, tokens in variants:
            negatives.append(
                pool(compose(params, cache.image(image_id), cache.text(tokens))))
    return QueryForward(query_pooled=query_pooled, target_pooled=target_pooled,
                        composed_negatives=negatives,
                        text_global_pooled=text_global_pooled(text_bundle))


def _triplet_only_loss(forwards: list[QueryForward], margins: MarginConfig) -> Tensor:
    """Plain one-directional objective: each composed query is pulled toward
    its own target and pushed from the other targets in the batch by a fixed
    margin. No counterfactuals, reconstruction, or batch alignment."""
    terms = []
    for i, f in enumerate(forwards):
        for j, other in enumerate(forwards):
            if j != i:
                terms.append(triplet(f.target_pooled, other.target_pooled,
                                     f.query_pooled, margins.m))
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


def _abort_on_nan(loss_value: float, out_dir: Path, epoch: int, step: int,
                  lr: float, batch: list[Query]) -> None:
    if math.isfinite(loss_value):
        return
    dump = {
        "epoch": epoch,
        "step": step,
        "learning_rate": lr,
        "loss": repr(loss_value),
        "query_ids": [q.query_id for q in batch],
    }
    dump_path = out_dir / "nan_dump.json"
    dump_path.write_text(json.dumps(dump, indent=2, sort_keys=True), encoding="utf-8")
    raise RuntimeError(
        f"training aborted: non-finite loss at epoch {epoch} step {step}; "
        f"details in {dump_path}")


def train(config: TrainConfig, dataset: SyntheticDataset, out_dir,
          sidecar_path=None, initial_params: ModelParams | None = None) -> TrainResult:
    """Run the optimization; writes one checkpoint per epoch plus `model.btsr`.

    `sidecar_path` points at mined counterfactuals for the train split; with
    `config.inline_mining` they are mined here (using the starting weights)
    when the file is absent, and `mining_encoder='live'` re-mines at every
    epoch with the current weights instead. `initial_params` warm-starts from
    an existing model instead of a fresh initialization.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    validate_compatibility(config.encoder, dataset)

    train_queries = dataset.splits["train"]
    if len(train_queries) < config.batch_size:
        raise ValueError(f"train split of {len(train_queries)} is smaller than "
                         f"one batch of {config.batch_size}")

    if initial_params is not None:
        if initial_params.config != config.encoder:
            raise ValueError("warm-start parameters were built for a different "
                             "encoder configuration")
        params = initial_params
    else:
        params = init_model(np.random.default_rng(np.random.SeedSequence((config.seed, 0))),
                            config.encoder, n_p=config.n_p)

    counterfactuals: dict[int, CounterfactualSet] | None = None
    if config.loss_variant == "full":
        if config.mining_encoder == "live":
            if sidecar_path is not None and Path(sidecar_path).exists():
                raise ValueError("mining_encoder='live' re-embeds texts with the "
                                 "current weights every epoch; a precomputed "
                                 "sidecar would contradict that")
            # mined at the top of each epoch instead
        elif sidecar_path is not None and Path(sidecar_path).exists():
            counterfactuals = load_counterfactuals(sidecar_path, train_queries)
        elif config.inline_mining:
            counterfactuals = mine_inline(params, dataset, config.miner)
        else:
            raise ValueError(
                "mining sidecar not found and inline mining is disabled; run the "
                "miner first or set inline_mining")

    trainable = parameter_dict(params)
    optimizer = AdamW(trainable, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))

    steps_per_epoch = len(train_queries) // config.batch_size
    total_steps = steps_per_epoch * config.max_epochs
    step_losses: list[float] = []
    lr_curve: list[float] = []
    epoch_losses: list[float] = []
    checkpoint_paths: list[Path] = []
    global_step = 0

    for epoch in range(config.max_epochs):
        if config.loss_variant == "full" and config.mining_encoder == "live":
            counterfactuals = mine_inline(params, dataset, config.miner)
        order = shuffle_rng.permutation(len(train_queries))
        epoch_sum = 0.0
        for b in range(steps_per_epoch):
            batch = [train_queries[i] for i in order[b * config.batch_size:
                                                     (b + 1) * config.batch_size]]
            cache = _BundleCache(params, dataset.images)
            forwards = [
                _query_forward(params, cache, q,
                               None if counterfactuals is None
                               else counterfactuals[q.query_id])
                for q in batch
            ]
            if config.loss_variant == "full":
                loss = total_loss(forwards, params.recon, config.weights,
                                  config.margins, eps=config.transport_eps)
            else:
                loss = _triplet_only_loss(forwards, config.margins)

            lr = scheduled_lr(global_step, total_steps, config.learning_rate,
                              config.warmup_fraction)
            value = loss.item()
            _abort_on_nan(value, out, epoch, global_step, lr, batch)
            step_losses.append(value)
            lr_curve.append(lr)
            epoch_sum += value

            zero_grad(trainable.values())
            backward(loss)
            optimizer.step(lr)
            global_step += 1

        epoch_losses.append(epoch_sum / steps_per_epoch)
        ckpt = out / f"epoch_{epoch + 1:03d}.btsr"
        save_model(ckpt, params, extra_meta={
            "train_config": asdict(config),
            "epoch": epoch + 1,
            "rng_state": shuffle_rng.bit_generator.state,
            "step_losses": step_losses,
        })
        checkpoint_paths.append(ckpt)

    final = out / "model.btsr"
    save_model(final, params, extra_meta={
        "train_config": asdict(config),
        "epoch": config.max_epochs,
        "rng_state": shuffle_rng.bit_generator.state,
        "step_losses": step_losses,
        "epoch_losses": epoch_losses,
        "lr_curve": lr_curve,
    })
    return TrainResult(params=params, config=config, step_losses=step_losses,
                       epoch_losses=epoch_losses, lr_curve=lr_curve,
                       checkpoint_paths=checkpoint_paths, final_checkpoint=final)
