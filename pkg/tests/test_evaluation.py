import math

import numpy as np
import pytest

import oracles
from sevgrade.dataset import Manifest, Sample
from sevgrade.errors import ManifestError, MetricUndefinedError
from sevgrade.evaluation import (MetricsReport, aggregate, auroc, evaluate_run, evaluate_scores,
                                 format_table, spearman, write_report)
from sevgrade.scoring import ScoreReport, write_scores


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(MetricUndefinedError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pair_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(4, 30))
        s = rng.integers(0, 6, size=n).astype(float)  # many ties
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        assert auroc(s, y) == pytest.approx(oracles.auroc_pairs(s.tolist(), y.tolist()), abs=1e-12)


def test_spearman_examples():
    assert spearman([0.1, 0.2, 0.3, 0.4, 0.5], [0, 1, 2, 3, 4]) == pytest.approx(1.0)
    assert spearman([0.5, 0.4, 0.3, 0.2, 0.1], [0, 1, 2, 3, 4]) == pytest.approx(-1.0)
    x, g = [0.3, 0.1, 0.3, 0.7, 0.2, 0.7], [0, 0, 1, 2, 2, 4]
    assert spearman(x, g) == pytest.approx(oracles.spearman(x, g), abs=1e-12)
    with pytest.raises(MetricUndefinedError):
        spearman([1, 2], [0, 1])
    with pytest.raises(MetricUndefinedError):
        spearman([1, 1, 1], [0, 1, 2])


def _manifest():
    rows = [
        ("k0", 0, (0, 0), (0, 0, 0, 0)), ("k1", 1, (0, 0), (1, 0, 0, 0)),
        ("k2", 2, (1, 0), (1, 0, 0, 0)), ("k3", 3, (2, 1), (1, 1, 0, 0)),
        ("k4", 4, (3, 2), (2, 2, 1, 1)), ("k5", 0, (0, 0), (None,) * 4),
        ("k6", 2, (0, 0), (None,) * 4),  # OARSI unresolvable
    ]
    return Manifest(samples=tuple(Sample(f"{r}.png", f"p{r}", "left", "test", kl, j[0], j[1], o)
                                  for r, kl, j, o in rows))


def test_evaluate_toy_manifest_by_hand():
    scores = {"k0.png": 0.1, "k1.png": 0.3, "k2.png": 0.2, "k3.png": 0.6, "k4.png": 0.9,
              "k5.png": 0.05, "k6.png": 0.4}
    r = evaluate_scores(scores, _manifest())
    # KL>=2 positives {k2,k3,k4,k6} vs {k0,k1,k5}: k2 loses to k1 only
    assert r.auc_kl == pytest.approx(11 / 12)
    # OARSI positives {k2,k3,k4} vs {k0,k1,k5}; k6 left out
    assert r.auc_oarsi == pytest.approx(8 / 9)
    assert r.auc_kl_gt3 == 1.0
    s = [scores[k] for k in sorted(scores)]
    g = [0, 1, 2, 3, 4, 0, 2]
    assert r.src_kl == pytest.approx(oracles.spearman(s, g))
    assert r.n["oarsi_excluded"] == 1 and r.n["oa_kl"] == 4


def test_identity_scorer():
    m = _manifest()
    r = evaluate_scores({s.sample_id: float(s.kl_grade) for s in m}, m)
    assert r.auc_kl == 1.0 and r.src_kl == pytest.approx(1.0)


def test_unknown_ids_and_single_class():
    m = _manifest()
    with pytest.raises(ManifestError, match="zz"):
        evaluate_scores({"zz.png": 1.0}, m)
    healthy = Manifest(samples=tuple(s for s in m if s.kl_grade == 0))
    with pytest.raises(MetricUndefinedError):
        evaluate_scores({s.sample_id: 0.1 for s in healthy}, healthy)


def test_evaluate_run_from_file(tmp_path):
    m = _manifest()
    reports = [ScoreReport(s.sample_id, s_sev=0.1, s_oa=0.2, s_comb=float(s.kl_grade)) for s in m]
    path = write_scores(reports, tmp_path / "scores.csv", {})
    assert evaluate_run(path, m).auc_kl == 1.0


def test_table_and_report(tmp_path):
    a = MetricsReport(0.7, 0.6, 0.9, 0.4)
    b = MetricsReport(0.8, 0.7, 1.0, 0.5)
    row = aggregate("DCRL-FS_comb", "3", False, [a, b])
    assert row.mean["auc_kl"] == pytest.approx(0.75) and row.std["auc_kl"] == pytest.approx(0.05)
    table = format_table([row])
    assert "75.0 ± 5.0" in table and "0.450 ± 0.050" in table and "AUC_KL_g>3" in table
    write_report([row], tmp_path, extra={"seeds": [0, 1]})
    first = (tmp_path / "metrics.json").read_bytes()
    write_report([row], tmp_path, extra={"seeds": [0, 1]})
    assert (tmp_path / "metrics.json").read_bytes() == first
    assert not math.isnan(row.mean["src_kl"])
