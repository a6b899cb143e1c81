import math

import numpy as np
import pytest
import torch

import oracles
import sevgrade.trainer as trainer
from sevgrade.augment import SDAConfig
from sevgrade.dataset import Sample
from sevgrade.encoder import Encoder, EncoderConfig, encode_batch
from sevgrade.errors import ConfigError, GeometryError, MissingStageError
from sevgrade.trainer import (TrainConfig, bce_loss, compute_cd_max, compute_centre, load_stage,
                              pair_distance, pair_loss, plateau_reached, save_stage, train_dcrl,
                              train_ssl_ensemble, train_ssl_member)

IDENTITY = SDAConfig(t_norm=("identity",), t_anom=("identity",))


def _vectors_at(preds):
    """Unit 2-vectors a, b with 1 - cos(a, b) equal to each prediction."""
    a = torch.tensor([[1.0, 0.0]] * len(preds), dtype=torch.float64)
    theta = torch.tensor([math.acos(1.0 - p) for p in preds], dtype=torch.float64)
    return a, torch.stack([torch.cos(theta), torch.sin(theta)], dim=1)


def test_pair_loss_by_hand():
    # a 2x2 patch grid flattened to four coordinates
    a, b = _vectors_at([0.1, 0.2, 0.7, 0.9])
    loss, pred = pair_loss(a, b, np.array([[0, 0], [1, 1]]).ravel())
    expected = -0.25 * (math.log(0.9) + math.log(0.8) + math.log(0.7) + math.log(0.9))
    assert loss.item() == pytest.approx(expected, abs=1e-9)
    np.testing.assert_allclose(pred.numpy(), [0.1, 0.2, 0.7, 0.9], atol=1e-12)


def test_bce_clamps_out_of_range_predictions():
    loss = bce_loss(torch.tensor([1.5, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0]))
    assert loss.item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def _samples(n, split="train"):
    return [Sample(f"s{k}.png", f"p{k}", "left", split, 0, 0, 0, (0, 0, 0, 0)) for k in range(n)]


def _images(samples, seed=0, side=32):
    rng = np.random.default_rng(seed)
    return {s: rng.uniform(0.1, 0.9, (side, side)).astype(np.float32) for s in samples}


def test_reported_loss_matches_hand_computation(tiny32):
    samples = _samples(2)
    images = _images(samples)
    cfg = TrainConfig(N=2, K=1, lr=0.0, weight_decay=0.0, max_epochs=1)
    stage = train_ssl_member(samples, images, cfg, tiny32, IDENTITY, seed=11)
    enc = Encoder(tiny32, seed=11)
    emb = encode_batch([images[s] for s in samples], enc)
    grid_a, grid_b = emb[0].reshape(-1, 64), emb[1].reshape(-1, 64)
    preds = [oracles.cd(x, y) for x, y in zip(grid_a.tolist(), grid_b.tolist())]
    # both epoch pairs are (0,1) and (1,0) under identity, all targets 0
    expected = -sum(math.log(1.0 - p) for p in preds) / len(preds)
    assert stage.loss_curve[0] == pytest.approx(expected, abs=1e-6)


def test_zero_lr_plateau_stops_early(tiny32):
    # two samples under identity give the same pairs, hence the same loss, every epoch
    samples = _samples(2)
    cfg = TrainConfig(N=2, K=1, lr=0.0, weight_decay=0.0, max_epochs=30)
    stage = train_ssl_member(samples, _images(samples), cfg, tiny32, IDENTITY, seed=0)
    assert stage.stopped_early and len(stage.loss_curve) == 6


def test_ssl_training_reduces_loss(small_corpus, tiny32):
    from sevgrade.dataset import ImageStore
    store = ImageStore(small_corpus, 32)
    samples = [s for s in small_corpus if s.kl_grade == 0][:4]
    cfg = TrainConfig(N=4, K=1, lr=1e-3, weight_decay=0.0, max_epochs=8, early_stopping=False)
    stage = train_ssl_member(samples, store, cfg, tiny32, SDAConfig(), seed=0)
    assert np.mean(stage.loss_curve[-3:]) < stage.loss_curve[0]
    assert stage.cd_max > 0 and stage.c_norm.shape == (64,)


def test_ensemble_reference_sizes():
    pool = _samples(150)
    images = _images(pool, side=24)
    enc = EncoderConfig("tiny", 3, True, 3, 24, False)
    cfg = TrainConfig(N=30, K=10, lr=1e-6, max_epochs=1)
    members = train_ssl_ensemble(pool, images, cfg, enc, SDAConfig())
    assert len(members) == 10
    assert len({tuple(m.train_ids) for m in members}) == 10
    assert all(len(m.train_ids) == 30 for m in members)
    with pytest.raises(ConfigError):
        train_ssl_ensemble(pool[:20], images, cfg, enc, SDAConfig())


def test_plateau_rule():
    assert not plateau_reached([5, 4, 3, 2, 1], 5, 1e-3)
    assert plateau_reached([5, 4, 4, 4, 4, 4, 4], 5, 1e-3)
    assert not plateau_reached([5, 4, 4, 4, 4, 3], 5, 1e-3)
    assert plateau_reached([0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2], 5, 1e-3, "max")
    assert not plateau_reached([0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.3], 5, 1e-3, "max")


def test_centre_and_cd_max_examples():
    grids = np.array([[[[1.0, 0.0]]], [[[0.0, 1.0]]], [[[1.0, 1.0]]]])
    np.testing.assert_allclose(compute_centre(grids), [2 / 3, 2 / 3])
    assert compute_cd_max(grids) == pytest.approx(1.0)
    assert pair_distance([1, 0], [0, 3]) == pytest.approx(1.0)
    with pytest.raises(GeometryError):
        compute_cd_max(grids[:1])
    with pytest.raises(GeometryError):
        compute_centre([])


def test_cd_max_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        emb = rng.normal(size=(5, 3, 3, 4))
        assert compute_cd_max(emb) == pytest.approx(oracles.cd_max(emb.tolist(), True), abs=1e-9)


def test_dcrl_targets_follow_partner(monkeypatch):
    enc = EncoderConfig("tiny", 3, False, 1, 32, False)
    normals, anoms = _samples(4), _samples(7)[4:]
    anoms = [Sample(s.image_ref.replace("s", "a"), "q" + s.patient_id, "left", "train", 4, 3, 3,
                    (3, 3, 3, 3)) for s in anoms]
    images = _images(normals + anoms, seed=3)
    fixed = encode_batch([images[s] for s in normals + anoms], Encoder(enc, seed=9))
    seen = []
    real = trainer.pair_loss

    def spy(emb_i, emb_j, labels):
        d = np.abs(fixed - emb_j.detach().double().numpy()).sum(axis=1)
        seen.append((int(np.argmin(d)), float(labels)))
        return real(emb_i, emb_j, labels)

    monkeypatch.setattr(trainer, "pair_loss", spy)
    cfg = TrainConfig(mode="dcrl", N=4, K=1, lr=0.0, weight_decay=0.0, max_epochs=10, early_stopping=False)
    stage = train_dcrl(normals, anoms, images, cfg, enc, seed=9)
    assert len(seen) == 40
    for partner, y in seen:
        assert y == (1.0 if partner >= 4 else 0.0)
    assert {p for p, _ in seen} - set(range(7)) == set()
    assert stage.anom_ids == [s.sample_id for s in anoms]
    assert len(stage.monitor_curve) == 10


def test_dcrl_input_checks():
    enc = EncoderConfig("tiny", 3, False, 1, 32, False)
    cfg = TrainConfig(mode="dcrl")
    with pytest.raises(ConfigError):
        train_dcrl(_samples(2), [], {}, cfg, enc, 0)
    with pytest.raises(ConfigError):
        train_dcrl(_samples(2), _samples(1), {}, cfg, EncoderConfig("tiny", 3, True, 3, 32, False), 0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4).validate()


def test_checkpoint_round_trip(tmp_path, tiny32):
    samples = _samples(3)
    images = _images(samples)
    cfg = TrainConfig(N=3, K=1, lr=1e-3, max_epochs=2, early_stopping=False)
    stage = train_ssl_member(samples, images, cfg, tiny32, SDAConfig(), seed=4)
    save_stage(stage, tmp_path / "m0", {"note": "x"})
    back = load_stage(tmp_path / "m0")
    np.testing.assert_array_equal(back.c_norm, stage.c_norm)
    assert back.cd_max == stage.cd_max and back.train_ids == stage.train_ids
    assert back.loss_curve == stage.loss_curve
    batch = [images[s] for s in samples]
    np.testing.assert_array_equal(encode_batch(batch, back.encoder), encode_batch(batch, stage.encoder))
    assert not (tmp_path / "m0.partial").exists()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingStageError):
        load_stage(tmp_path / "stage1" / "member_0")
