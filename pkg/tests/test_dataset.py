import numpy as np
import pytest

from sevgrade.dataset import (COLUMNS, Manifest, Sample, SyntheticSpec, convert_oai_table, diagnose,
                              diagnose_oarsi, generate_synthetic_corpus, load_image, load_manifest,
                              sample_training_pool, write_manifest)
from sevgrade.errors import CapacityError, ConfigError, LabelError, LeakageError, ManifestError

HEADER = ",".join(COLUMNS)


def _write(tmp_path, rows, name="m.csv"):
    path = tmp_path / name
    path.write_text("\n".join([HEADER, *rows]) + "\n")
    return path


def knee(ref="a.png", pid="p1", side="left", split="train", kl=0, jsn=(0, 0), ost=(0, 0, 0, 0)):
    return Sample(ref, pid, side, split, kl, jsn[0], jsn[1], tuple(ost))


def test_load_four_rows_two_patients(tmp_path):
    path = _write(tmp_path, [
        "p1_l.png,p1,left,train,0,0,0,0,0,0,0",
        "p1_r.png,p1,right,train,1,0,0,1,0,0,0",
        "p2_l.png,p2,left,test,3,2,1,1,1,0,2",
        "p2_r.png,p2,right,test,,,,,,,",
    ])
    m = load_manifest(path)
    assert len(m) == 4
    assert m.samples[2].kl_grade == 3 and m.samples[2].osteophyte_grades == (1, 1, 0, 2)
    assert m.samples[3].kl_grade is None and m.samples[3].jsn_medial is None
    assert [s.sample_id for s in m.split("test")] == ["p2_l.png", "p2_r.png"]


def test_patient_in_two_splits_is_leakage(tmp_path):
    path = _write(tmp_path, ["a.png,P1,left,train,0,0,0,0,0,0,0",
                             "b.png,P1,right,test,0,0,0,0,0,0,0"])
    with pytest.raises(LeakageError, match="P1"):
        load_manifest(path)


def test_empty_file_warns_and_returns_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.warns(UserWarning, match="empty"):
        m = load_manifest(path)
    assert len(m) == 0


@pytest.mark.parametrize("row, fragment", [
    ("a.png,p1,left,train,7,0,0,0,0,0,0", "kl"),
    ("a.png,p1,middle,train,0,0,0,0,0,0,0", "knee_side"),
    ("a.png,p1,left,holdout,0,0,0,0,0,0,0", "split"),
    ("a.png,p1,left,train,x,0,0,0,0,0,0", "not an integer"),
    ("a.png,p1,left,train,0,0,0", "fields"),
])
def test_bad_rows_name_the_row(tmp_path, row, fragment):
    path = _write(tmp_path, ["ok.png,p0,left,train,0,0,0,0,0,0,0", row])
    with pytest.raises(ManifestError, match=fragment) as info:
        load_manifest(path)
    assert info.value.row == 2
    assert "row 2" in str(info.value)


def test_duplicate_image_ref(tmp_path):
    path = _write(tmp_path, ["a.png,p1,left,train,0,0,0,0,0,0,0",
                             "a.png,p1,right,train,0,0,0,0,0,0,0"])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_round_trip(tmp_path):
    m = Manifest(samples=(knee("a.png"), knee("b.png", side="right", kl=None, jsn=(None, 1),
                                                 ost=(None, 2, None, 0))),
                 image_side=64, source="unit")
    path = write_manifest(m, tmp_path / "out.csv")
    back = load_manifest(path)
    assert back.samples == m.samples
    assert back.image_side == 64 and back.source == "unit"


@pytest.mark.parametrize("sample, expected", [
    (knee(jsn=(2, 0), ost=(0, 0, 0, 0)), True),
    (knee(jsn=(1, 0), ost=(1, 0, 0, 0)), True),
    (knee(kl=0, jsn=(0, 0), ost=(None,) * 4), False),
    (knee(jsn=(0, 0), ost=(1, 1, 0, 0)), True),
    (knee(jsn=(0, 0), ost=(1, 0, 0, 0)), False),
    (knee(jsn=(1, 0), ost=(0, 0, 0, 0)), False),
    (knee(jsn=(0, 3), ost=(None,) * 4, kl=4), True),
])
def test_oarsi_examples(sample, expected):
    assert diagnose_oarsi(sample) is expected


@pytest.mark.parametrize("sample", [
    knee(kl=2, jsn=(0, 0), ost=(None,) * 4),
    knee(kl=1, jsn=(1, 0), ost=(None,) * 4),
    knee(kl=0, jsn=(None, None), ost=(0, 0, 0, 0)),
])
def test_oarsi_unresolvable(sample):
    with pytest.raises(LabelError):
        diagnose_oarsi(sample)


def test_diagnose_kl_cutoff():
    assert diagnose(knee(kl=2, jsn=(2, 0))).oa_kl
    assert not diagnose(knee(kl=1)).oa_kl


def test_missing_value_rule_on_table_marginals():
    # every KL 0/1 knee with no narrowing and no osteophyte reading is non-OA
    for kl in (0, 1):
        assert diagnose_oarsi(knee(kl=kl, jsn=(0, 0), ost=(None,) * 4)) is False


def _pool_manifest(n_healthy):
    samples = [knee(f"h{i:03d}.png", pid=f"p{i:03d}") for i in range(n_healthy)]
    samples += [knee(f"s{i}.png", pid=f"q{i}", kl=3, jsn=(2, 0)) for i in range(5)]
    samples += [knee(f"t{i}.png", pid=f"r{i}", split="test") for i in range(5)]
    return Manifest(samples=tuple(samples))


def test_training_pool_reference_sizes():
    pool = sample_training_pool(_pool_manifest(639), 150, rng_seed=0)
    assert len(pool) == 150
    assert all(s.kl_grade == 0 and s.split == "train" for s in pool)
    assert len({s.sample_id for s in pool}) == 150


def test_training_pool_determinism_and_edges():
    m = _pool_manifest(20)
    assert sample_training_pool(m, 8, 4) == sample_training_pool(m, 8, 4)
    assert sample_training_pool(m, 8, 4) != sample_training_pool(m, 8, 5)
    assert sample_training_pool(m, 0, 1) == []
    with pytest.raises(CapacityError):
        sample_training_pool(m, 21, 0)


def test_synthetic_counts_and_splits(tmp_path):
    m = generate_synthetic_corpus(SyntheticSpec(n_per_grade=10, image_side=32, rng_seed=1), tmp_path)
    assert len(m) == 50
    for g in range(5):
        assert sum(s.kl_grade == g for s in m) == 10
    patients = {}
    for s in m:
        patients.setdefault(s.patient_id, set()).add(s.split)
    assert all(len(v) == 1 for v in patients.values())
    assert load_manifest(tmp_path / "manifest.csv").samples == m.samples


def test_synthetic_is_bit_identical(tmp_path):
    spec = SyntheticSpec(n_per_grade=3, image_side=32, rng_seed=9)
    a = generate_synthetic_corpus(spec, tmp_path / "a")
    b = generate_synthetic_corpus(spec, tmp_path / "b")
    assert a.samples == b.samples
    for s in a:
        assert (tmp_path / "a" / s.image_ref).read_bytes() == (tmp_path / "b" / s.image_ref).read_bytes()


def test_synthetic_grade_distance(tmp_path):
    m = generate_synthetic_corpus(SyntheticSpec(n_per_grade=8, image_side=64, rng_seed=2), tmp_path)
    imgs = {g: [load_image(m.image_path(s)) for s in m if s.kl_grade == g] for g in (0, 4)}
    same = [np.abs(a - b).mean() for i, a in enumerate(imgs[0]) for b in imgs[0][i + 1:]]
    cross = [np.abs(a - b).mean() for a in imgs[0] for b in imgs[4]]
    assert np.mean(same) < np.mean(cross)


def test_synthetic_rejects_tiny_images(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(SyntheticSpec(n_per_grade=2, image_side=16), tmp_path)


def test_oai_adapter(tmp_path):
    table = tmp_path / "kxr.txt"
    table.write_text(
        "ID|SIDE|V00XRKL|V00XRJSM|V00XRJSL|V00XROSFM|V00XROSFL|V00XROSTM|V00XROSTL\n"
        "9000099|1: Right|2: 2|1: 1|0: 0|1: 1|0: 0|.: Missing Form/Incomplete Workbook|0: 0\n"
        "9000099|2: Left|0: 0|0: 0|0: 0|.|.|.|.\n"
        "9000296|1: Right|4|3|2|3|2|3|1\n")
    m = convert_oai_table(table, tmp_path / "manifest.csv", seed=0)
    assert len(m) == 3
    right = m.by_id()["images/9000099_right.png"]
    assert right.kl_grade == 2 and right.jsn_medial == 1 and right.osteophyte_grades == (1, 0, None, 0)
    left = m.by_id()["images/9000099_left.png"]
    assert left.osteophyte_grades == (None,) * 4 and diagnose_oarsi(left) is False
    assert left.split == right.split
    assert load_manifest(tmp_path / "manifest.csv").samples == m.samples
