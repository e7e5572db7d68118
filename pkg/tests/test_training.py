import hashlib
import json
import math

import numpy as np
import pytest

from cirlite.autodiff import Tensor
from cirlite.data import SyntheticSpec, generate_synthetic, load_dataset
from cirlite.encoders import EncoderConfig
from cirlite.mining import MinerConfig
from cirlite.model import init_model, parameter_dict
from cirlite.training import (AdamW, TrainConfig, config_from_json,
                              config_to_json, mine_inline, scheduled_lr, train,
                              validate_compatibility)
from oracles import adamw_step_ref

TINY_ENCODER = dict(depth=2, d=8, heads=2, patch=3, vocab_size=16, max_len=8)


def tiny_config(**overrides):
    base = dict(
        batch_size=5, max_epochs=2, learning_rate=1e-3, warmup_fraction=0.1,
        inline_mining=True, n_p=2, seed=3,
        miner=MinerConfig(k_text_negatives=2, k_image_negatives=2,
                          k_perturb_candidates=8, k_perturb_selected=2),
        encoder=EncoderConfig(**TINY_ENCODER),
    )
    return TrainConfig(**{**base, **overrides})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainset")
    spec = SyntheticSpec(g=3, patch=3, colors=("red", "green", "blue", "yellow"),
                         gallery_size=12, train_queries=15, val_queries=4,
                         test_queries=6, seed=7)
    generate_synthetic(spec, out)
    return load_dataset(out)


# -- config -----------------------------------------------------------------


def test_config_json_round_trip():
    cfg = tiny_config(loss_variant="triplet_only", weight_decay=0.02)
    assert config_from_json(config_to_json(cfg)) == cfg


def test_config_rejects_singleton_batch():
    with pytest.raises(ValueError, match="batch size"):
        tiny_config(batch_size=1)


def test_config_rejects_full_warmup():
    with pytest.raises(ValueError, match="warmup"):
        tiny_config(warmup_fraction=1.0)


def test_config_rejects_unknown_variant():
    with pytest.raises(ValueError, match="loss variant"):
        tiny_config(loss_variant="contrastive")


# -- schedule -----------------------------------------------------------------


def test_schedule_warmup_and_decay_invariants():
    peak, total = 3e-4, 100
    lrs = [scheduled_lr(t, total, peak, 0.1) for t in range(total)]
    assert lrs[0] == 0.0
    assert lrs[10] == pytest.approx(peak)
    assert max(lrs) == pytest.approx(peak)
    assert lrs[-1] < 1e-3 * peak
    # ramp up, then strictly down
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a > b for a, b in zip(lrs[10:-1], lrs[11:]))


def test_schedule_without_warmup_starts_at_peak():
    assert scheduled_lr(0, 50, 1e-3, 0.0) == pytest.approx(1e-3)
    assert scheduled_lr(49, 50, 1e-3, 0.0) < 1e-6


def test_schedule_tiny_fraction_still_ramps():
    # one warmup step even when the fraction rounds down to zero steps
    assert scheduled_lr(0, 5, 1.0, 0.05) == 0.0
    assert scheduled_lr(1, 5, 1.0, 0.05) == pytest.approx(1.0)


# -- optimizer ----------------------------------------------------------------


def test_adamw_matches_reference_update():
    rng = np.random.default_rng(5)
    p0 = rng.standard_normal((3, 2))
    params = {"w": Tensor(p0, requires_grad=True)}
    opt = AdamW(params, weight_decay=0.04)
    ref_p, ref_m, ref_v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t in range(1, 4):
        g = rng.standard_normal((3, 2))
        params["w"].grad = g.copy()
        opt.step(lr=0.01)
        ref_p, ref_m, ref_v = adamw_step_ref(ref_p, g, ref_m, ref_v, t,
                                             0.01, 0.9, 0.999, 1e-8, 0.04)
        assert np.max(np.abs(params["w"].data - ref_p)) < 1e-14


def test_adamw_decay_is_decoupled_from_gradient():
    # with zero gradient the update is pure decay: p <- p (1 - lr * wd)
    p0 = np.full((2,), 2.0)
    params = {"w": Tensor(p0, requires_grad=True)}
    opt = AdamW(params, weight_decay=0.5)
    params["w"].grad = np.zeros(2)
    opt.step(lr=0.1)
    assert np.allclose(params["w"].data, 2.0 * (1 - 0.1 * 0.5))


# -- train loop ----------------------------------------------------------------


def test_zero_learning_rate_is_a_bitexact_noop(dataset, tmp_path):
    cfg = tiny_config(learning_rate=0.0, warmup_fraction=0.0, max_epochs=1)
    params = init_model(np.random.default_rng(1), cfg.encoder, n_p=cfg.n_p)
    before = {k: t.data.copy() for k, t in parameter_dict(params).items()}
    train(cfg, dataset, tmp_path, initial_params=params)
    after = parameter_dict(params)
    for name, data in before.items():
        assert np.array_equal(data, after[name].data), name


def test_missing_sidecar_rejected(dataset, tmp_path):
    cfg = tiny_config(inline_mining=False)
    with pytest.raises(ValueError, match="sidecar"):
        train(cfg, dataset, tmp_path, sidecar_path=tmp_path / "absent.jsonl")


def test_loss_decreases_on_three_seeds(dataset, tmp_path):
    for seed in (0, 1, 2):
        cfg = tiny_config(seed=seed, max_epochs=17)  # 3 steps/epoch -> 51 steps
        result = train(cfg, dataset, tmp_path / f"s{seed}")
        assert len(result.step_losses) >= 51
        assert result.step_losses[50] < result.step_losses[0], (
            f"seed {seed}: {result.step_losses[0]} -> {result.step_losses[50]}")


def test_identical_config_and_seed_reproduce_checkpoint_hash(dataset, tmp_path):
    cfg = tiny_config()
    digests = []
    for run in ("a", "b"):
        result = train(cfg, dataset, tmp_path / run)
        assert len(result.checkpoint_paths) == cfg.max_epochs
        digests.append(hashlib.sha256(result.final_checkpoint.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_epoch_checkpoints_carry_state(dataset, tmp_path):
    cfg = tiny_config(max_epochs=1)
    result = train(cfg, dataset, tmp_path)
    from cirlite.model import load_model
    _, meta = load_model(result.checkpoint_paths[0])
    assert meta["epoch"] == 1
    assert meta["rng_state"]["bit_generator"] == "PCG64"
    assert len(meta["step_losses"]) == len(result.step_losses)
    assert json.loads(json.dumps(meta["train_config"]))  # JSON-serializable


def test_nan_loss_aborts_with_step_dump(dataset, tmp_path):
    cfg = tiny_config(max_epochs=1)
    params = init_model(np.random.default_rng(2), cfg.encoder, n_p=cfg.n_p)
    # encoders validate their outputs, so poison a loss-side head instead
    params.recon.visual.w.data[0, 0] = math.nan
    with pytest.raises(RuntimeError, match="non-finite loss"):
        train(cfg, dataset, tmp_path, initial_params=params)
    dump = json.loads((tmp_path / "nan_dump.json").read_text(encoding="utf-8"))
    assert dump["step"] == 0
    assert len(dump["query_ids"]) == cfg.batch_size


def test_warm_start_requires_matching_encoder(dataset, tmp_path):
    cfg = tiny_config()
    other = init_model(np.random.default_rng(0),
                       EncoderConfig(**{**TINY_ENCODER, "d": 16}), n_p=2)
    with pytest.raises(ValueError, match="different encoder"):
        train(cfg, dataset, tmp_path, initial_params=other)


def test_train_split_smaller_than_batch_rejected(dataset, tmp_path):
    cfg = tiny_config(batch_size=16)
    with pytest.raises(ValueError, match="smaller than"):
        train(cfg, dataset, tmp_path)


def test_triplet_only_variant_runs_without_mining(dataset, tmp_path):
    cfg = tiny_config(loss_variant="triplet_only", inline_mining=False, max_epochs=1)
    result = train(cfg, dataset, tmp_path)
    assert all(math.isfinite(v) for v in result.step_losses)


def test_validate_compatibility_rejects_small_vocab_table(dataset):
    enc = EncoderConfig(**{**TINY_ENCODER, "vocab_size": 4})
    with pytest.raises(ValueError, match="vocabulary"):
        validate_compatibility(enc, dataset)


def test_validate_compatibility_rejects_bad_patch(dataset):
    enc = EncoderConfig(**{**TINY_ENCODER, "patch": 4})
    with pytest.raises(ValueError, match="divisible"):
        validate_compatibility(enc, dataset)


def test_inline_mining_is_deterministic(dataset):
    cfg = tiny_config()
    params = init_model(np.random.default_rng(4), cfg.encoder, n_p=cfg.n_p)
    a = mine_inline(params, dataset, cfg.miner)
    b = mine_inline(params, dataset, cfg.miner)
    assert a.keys() == b.keys()
    for qid in a:
        assert a[qid].ics == b[qid].ics
        assert a[qid].pcs == b[qid].pcs


def test_live_mining_requires_inline():
    with pytest.raises(ValueError, match="inline_mining"):
        tiny_config(mining_encoder="live", inline_mining=False)
    with pytest.raises(ValueError, match="mining encoder"):
        tiny_config(mining_encoder="hourly")


def test_live_mining_rejects_precomputed_sidecar(dataset, tmp_path):
    sidecar = tmp_path / "counterfactuals.jsonl"
    sidecar.write_text("")
    cfg = tiny_config(mining_encoder="live", inline_mining=True, max_epochs=1)
    with pytest.raises(ValueError, match="sidecar"):
        train(cfg, dataset, tmp_path / "run", sidecar_path=sidecar)


def test_live_mining_trains_and_is_deterministic(dataset, tmp_path):
    cfg = tiny_config(mining_encoder="live", inline_mining=True, max_epochs=2)
    a = train(cfg, dataset, tmp_path / "a")
    b = train(cfg, dataset, tmp_path / "b")
    assert a.step_losses == b.step_losses
    assert all(math.isfinite(v) for v in a.step_losses)
