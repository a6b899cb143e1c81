import numpy as np
import pytest

import oracles
from sevgrade.encoder import Encoder, EncoderConfig
from sevgrade.errors import ConfigError, GeometryError, ManifestError
from sevgrade.scoring import (ScoreReport, balanced_margin, calibrate_threshold_t, combine,
                              dcrl_score_from_embedding, nearest_rank_percentile, read_scores,
                              score_combined, score_dcrl, ssl_score_from_embedding, vote_anomaly,
                              votes_from_scores, write_scores)
from sevgrade.trainer import TrainedStage


def test_ssl_score_examples():
    c = np.array([1.0, 2.0, 3.0])
    assert ssl_score_from_embedding(np.tile(c, (3, 3, 1)), c) == pytest.approx(0.0, abs=1e-12)
    # two patches at CD 0.2 and 0.4 from the centre
    e = np.array([1.0, 0.0])
    p = lambda d: [1 - d, np.sqrt(1 - (1 - d) ** 2)]  # noqa: E731
    grid = np.array([[p(0.2), p(0.4)]])
    assert ssl_score_from_embedding(grid, e) == pytest.approx(0.3)
    with pytest.raises(GeometryError):
        ssl_score_from_embedding(grid, np.ones(3))


def test_ssl_score_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grid = rng.normal(size=(4, 4, 6))
        c = rng.normal(size=6)
        assert ssl_score_from_embedding(grid, c) == pytest.approx(oracles.ssl_score(grid.tolist(), c.tolist()),
                                                                  abs=1e-12)


def test_dcrl_score_examples():
    c = np.array([1.0, 0.0])
    assert dcrl_score_from_embedding(c, c, -c) == pytest.approx(2.0)
    assert dcrl_score_from_embedding(np.array([0.0, 1.0]), c, -c) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        dcrl_score_from_embedding(c, c, None)


@pytest.mark.parametrize("s_sev, s_oa, t, expected", [
    (0.5, 0.2, 0.3, 1.5), (0.1, 0.2, 0.3, 0.2), (0.3, 0.2, 0.3, 0.2), (0.0, 1.7, 0.3, 1.7),
])
def test_combine_examples(s_sev, s_oa, t, expected):
    assert combine(s_sev, s_oa, t) == pytest.approx(expected)


def test_combine_optional_clamp():
    assert combine(0.0, 1.7, 0.3, clamp_oa=True) == 1.0
    assert combine(0.0, -0.2, 0.3, clamp_oa=True) == 0.0


def test_combine_rejects_negative_threshold():
    with pytest.raises(ConfigError):
        combine(0.1, 0.1, -0.1)


def test_vote_examples():
    assert vote_anomaly([0.1, 0.2, 0.3], [0.5, 0.5, 0.5], 1.0) == (False, [False, False, False])
    assert vote_anomaly([0.9, 0.8, 0.95], [0.5, 0.5, 0.5], 1.0)[0]
    flagged, votes = vote_anomaly([0.9, 0.4, 0.95], [0.5, 0.5, 0.5], 1.0)
    assert not flagged and votes == [True, False, True]
    with pytest.raises(ConfigError):
        votes_from_scores(np.zeros((2, 0)), [], 1.0)
    with pytest.raises(ConfigError):
        votes_from_scores([[1.0]], [1.0], 0.5)


def test_balanced_margin_flags_target_count():
    rng = np.random.default_rng(1)
    scores = rng.uniform(0.5, 3.0, size=(40, 3))
    cd = np.array([0.4, 0.5, 0.6])
    for target in (1, 5, 17):
        m = balanced_margin(scores, cd, target)
        assert votes_from_scores(scores, cd, m).all(axis=1).sum() == target
    assert balanced_margin(scores, cd, 100) == 1.0


def test_nearest_rank_percentile():
    values = np.arange(100) / 100.0
    assert nearest_rank_percentile(values, 95) == pytest.approx(0.94)
    assert nearest_rank_percentile([0.3] * 7, 95) == 0.3
    assert nearest_rank_percentile([0.8], 95) == 0.8
    with pytest.raises(ConfigError):
        nearest_rank_percentile([], 95)


def _dcrl_stage(c_norm, c_anom, seed=0):
    enc = Encoder(EncoderConfig("tiny", 3, False, 1, 32, False), seed=seed)
    return TrainedStage(encoder=enc, c_norm=np.asarray(c_norm), c_anom=np.asarray(c_anom), cd_max=0.1,
                        train_ids=[], loss_curve=[], mode="dcrl")


def test_score_paths_agree_with_oracle():
    rng = np.random.default_rng(2)
    imgs = [rng.uniform(size=(32, 32)).astype(np.float32) for _ in range(6)]
    sev = _dcrl_stage(rng.uniform(size=64), rng.uniform(size=64), seed=1)
    oa = _dcrl_stage(rng.uniform(size=64), rng.uniform(size=64), seed=2)
    from sevgrade.encoder import encode
    s_sev, s_oa = score_dcrl(imgs, sev), score_dcrl(imgs, oa)
    # post-ReLU embeddings and non-negative centres keep every distance in [0, 1]
    assert ((0 <= s_sev) & (s_sev <= 1) & (0 <= s_oa) & (s_oa <= 1)).all()
    for k, img in enumerate(imgs):
        e = encode(img, sev.encoder).tolist()
        assert s_sev[k] == pytest.approx(oracles.dcrl_score(e, sev.c_norm.tolist(), sev.c_anom.tolist()),
                                         abs=1e-6)
    t = float(np.median(s_sev))
    comb = score_combined(imgs, sev, oa, t)
    for k in range(len(imgs)):
        assert comb[k] == oracles.combined(s_sev[k], s_oa[k], t)
    assert calibrate_threshold_t(sev, imgs, 95) == max(s_sev)
    with pytest.raises(ConfigError):
        calibrate_threshold_t(sev, [], 95)


def test_scores_file_round_trip(tmp_path):
    reports = [ScoreReport("a", 0.1, 0.2, 0.3, 0.3, [True, False]), ScoreReport("b", s_ssl=0.5)]
    path = write_scores(reports, tmp_path / "scores.csv", {"t": 0.25, "seed": 0})
    meta, rows = read_scores(path)
    assert meta == {"seed": "0", "t": "0.25"}
    assert rows[0] == {"sample_id": "a", "s_ssl": 0.1, "s_sev": 0.2, "s_oa": 0.3, "s_comb": 0.3,
                       "vote_count": 1.0}
    assert rows[1]["s_sev"] is None


def test_duplicate_score_ids(tmp_path):
    path = write_scores([ScoreReport("a", 0.1), ScoreReport("a", 0.2)], tmp_path / "s.csv", {})
    with pytest.raises(ManifestError, match="duplicate"):
        read_scores(path)


def test_report_needs_both_parts_for_comb():
    with pytest.raises(ValueError):
        ScoreReport("a", s_comb=1.0)
