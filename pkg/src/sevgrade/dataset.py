"""Labelled knee-image manifests, diagnosis rules and a synthetic corpus.

A manifest is a delimited text file with one row per knee image.  Optional
``# key=value`` lines before the header carry corpus metadata.  Absent grades
are empty fields.
"""
import csv
import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from sevgrade.errors import CapacityError, ConfigError, LabelError, LeakageError, ManifestError

LOGGER = logging.getLogger(__name__)

COLUMNS = ("image_ref", "patient_id", "knee_side", "split", "kl", "jsn_med", "jsn_lat",
           "ost_mdf", "ost_ldf", "ost_mpt", "ost_lpt")
OSTEOPHYTE_COLUMNS = ("ost_mdf", "ost_ldf", "ost_mpt", "ost_lpt")
SPLITS = ("train", "val", "test")
SIDES = ("left", "right")
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class Sample:
    image_ref: str
    patient_id: str
    knee_side: str
    split: str
    kl_grade: Optional[int] = None
    jsn_medial: Optional[int] = None
    jsn_lateral: Optional[int] = None
    # medial/lateral distal femur, medial/lateral proximal tibia
    osteophyte_grades: tuple = (None, None, None, None)

    @property
    def sample_id(self) -> str:
        return self.image_ref

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.knee_side not in SIDES:
            raise ValueError(f"knee_side must be one of {SIDES}, got {self.knee_side!r}")
        if len(self.osteophyte_grades) != 4:
            raise ValueError("osteophyte_grades needs exactly 4 entries")
        _check_range("kl", self.kl_grade, 4)
        _check_range("jsn_med", self.jsn_medial, 3)
        _check_range("jsn_lat", self.jsn_lateral, 3)
        for name, g in zip(OSTEOPHYTE_COLUMNS, self.osteophyte_grades):
            _check_range(name, g, 3)


def _check_range(name, value, upper):
    if value is not None and not (0 <= value <= upper):
        raise ValueError(f"{name}={value} outside 0..{upper}")


@dataclass(frozen=True)
class DiagnosisLabels:
    oa_kl: bool
    oa_oarsi: bool


@dataclass(frozen=True)
class Manifest:
    samples: tuple = ()
    image_side: Optional[int] = None
    source: str = "unknown"
    root: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.image_ref in seen:
                raise ManifestError(f"duplicate image_ref {s.image_ref!r}")
            seen.add(s.image_ref)
        check_patient_splits(self.samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict:
        return {s.sample_id: s for s in self.samples}

    def image_path(self, sample: Sample) -> Path:
        p = Path(sample.image_ref)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


def check_patient_splits(samples: Sequence[Sample]) -> None:
    """Raise LeakageError if any patient has knees in more than one split."""
    splits = {}
    for s in samples:
        prev = splits.setdefault(s.patient_id, s.split)
        if prev != s.split:
            raise LeakageError(
                f"patient {s.patient_id!r} appears in splits {prev!r} and {s.split!r}")


def _parse_grade(text, upper, column, row):
    text = text.strip()
    if text == "":
        return None
    try:
        value = int(text)
    except ValueError:
        raise ManifestError(f"column {column}: {text!r} is not an integer", row=row) from None
    if not 0 <= value <= upper:
        raise ManifestError(f"column {column}: {value} outside 0..{upper}", row=row)
    return value


def load_manifest(path) -> Manifest:
    path = Path(path)
    meta = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") and not body:
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    if not body:
        warnings.warn(f"manifest {path} is empty", stacklevel=2)
        return _manifest_from(meta, (), path.parent)

    reader = csv.DictReader(body)
    missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ManifestError(f"header lacks columns {missing}", row=0)
    samples = []
    for row_no, row in enumerate(reader, start=1):
        if None in row.values() or None in row:
            raise ManifestError("wrong number of fields", row=row_no)
        ref = row["image_ref"].strip()
        patient = row["patient_id"].strip()
        if not ref or not patient:
            raise ManifestError("image_ref and patient_id are required", row=row_no)
        side = row["knee_side"].strip().lower()
        split = row["split"].strip().lower()
        if side not in SIDES:
            raise ManifestError(f"knee_side {side!r} not in {SIDES}", row=row_no)
        if split not in SPLITS:
            raise ManifestError(f"split {split!r} not in {SPLITS}", row=row_no)
        samples.append(Sample(
            image_ref=ref,
            patient_id=patient,
            knee_side=side,
            split=split,
            kl_grade=_parse_grade(row["kl"], 4, "kl", row_no),
            jsn_medial=_parse_grade(row["jsn_med"], 3, "jsn_med", row_no),
            jsn_lateral=_parse_grade(row["jsn_lat"], 3, "jsn_lat", row_no),
            osteophyte_grades=tuple(_parse_grade(row[c], 3, c, row_no) for c in OSTEOPHYTE_COLUMNS),
        ))
    refs = set()
    for row_no, s in enumerate(samples, start=1):
        if s.image_ref in refs:
            raise ManifestError(f"duplicate image_ref {s.image_ref!r}", row=row_no)
        refs.add(s.image_ref)
    return _manifest_from(meta, tuple(samples), path.parent)


def _manifest_from(meta, samples, root):
    side = meta.get("image_side")
    return Manifest(samples=samples, image_side=int(side) if side else None,
                    source=meta.get("source", "unknown"), root=root)


def _fmt(v):
    return "" if v is None else str(v)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if manifest.image_side is not None:
            fh.write(f"# image_side={manifest.image_side}\n")
        fh.write(f"# source={manifest.source}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for s in manifest.samples:
            writer.writerow([s.image_ref, s.patient_id, s.knee_side, s.split, _fmt(s.kl_grade),
                             _fmt(s.jsn_medial), _fmt(s.jsn_lateral),
                             *(_fmt(g) for g in s.osteophyte_grades)])
    os.replace(tmp, path)
    return path


def diagnose_kl(sample: Sample) -> bool:
    if sample.kl_grade is None:
        raise LabelError(f"{sample.sample_id}: KL grade absent")
    return sample.kl_grade >= 2


def diagnose_oarsi(sample: Sample) -> bool:
    """OARSI radiographic OA from JSN and osteophyte grades.

    OA if any JSN grade is >= 2, the osteophyte grades sum to >= 2, or grade-1
    JSN co-occurs with a grade-1 osteophyte.  Absent osteophyte grades are
    read as no OA only when KL is 0 or 1 and both JSN grades are 0.
    """
    jsn = (sample.jsn_medial, sample.jsn_lateral)
    ost = [g for g in sample.osteophyte_grades if g is not None]
    ost_complete = len(ost) == 4
    jsn_present = [g for g in jsn if g is not None]

    if any(g >= 2 for g in jsn_present):
        return True
    if sum(ost) >= 2:
        return True
    if any(g == 1 for g in jsn_present) and any(g >= 1 for g in ost):
        return True
    if ost_complete and len(jsn_present) == 2:
        return False
    if sample.kl_grade in (0, 1) and jsn == (0, 0):
        return False
    raise LabelError(
        f"{sample.sample_id}: OARSI diagnosis unresolvable "
        f"(kl={sample.kl_grade}, jsn={jsn}, osteophytes={sample.osteophyte_grades})")


def diagnose(sample: Sample) -> DiagnosisLabels:
    return DiagnosisLabels(oa_kl=diagnose_kl(sample), oa_oarsi=diagnose_oarsi(sample))


def sample_training_pool(manifest: Manifest, pool_size: int, rng_seed: int) -> list:
    """Seeded draw of ``pool_size`` healthy (KL 0) training samples."""
    healthy = sorted((s for s in manifest.split("train") if s.kl_grade == 0),
                     key=lambda s: s.image_ref)
    if pool_size > len(healthy):
        raise CapacityError(
            f"pool_size={pool_size} but only {len(healthy)} healthy training samples")
    if pool_size <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    idx = np.sort(rng.choice(len(healthy), size=pool_size, replace=False))
    return [healthy[i] for i in idx]


def load_image(path, side: Optional[int] = None) -> np.ndarray:
    """Read an image as single-channel float32 in [0, 1], optionally resized."""
    with Image.open(path) as im:
        im = im.convert("L")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


class ImageStore:
    """Lazily loaded, cached images for the samples of one manifest."""

    def __init__(self, manifest: Manifest, side: Optional[int] = None):
        self.manifest = manifest
        self.side = side or manifest.image_side
        self._cache = {}

    def __getitem__(self, sample: Sample) -> np.ndarray:
        img = self._cache.get(sample.sample_id)
        if img is None:
            img = load_image(self.manifest.image_path(sample), self.side)
            self._cache[sample.sample_id] = img
        return img


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass
class SyntheticSpec:
    n_per_grade: object = 20  # int, or one count per grade
    grades: tuple = (0, 1, 2, 3, 4)
    image_side: int = 64
    rng_seed: int = 0
    split_fractions: tuple = (0.6, 0.1, 0.3)
    implant_rate: float = 0.05
    missing_osteophyte_rate: float = 0.2

    def counts(self) -> dict:
        if isinstance(self.n_per_grade, int):
            counts = {g: self.n_per_grade for g in self.grades}
        else:
            if len(self.n_per_grade) != len(self.grades):
                raise ConfigError("n_per_grade list must have one count per grade")
            counts = dict(zip(self.grades, self.n_per_grade))
        for g, n in counts.items():
            if g not in range(5):
                raise ConfigError(f"grade {g} outside 0..4")
            if n < 1:
                raise ConfigError(f"n_per_grade must be >= 1 (grade {g} has {n})")
        return counts


def _smooth_noise(rng, side, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma, mode="wrap")
    return field_ / (np.abs(field_).max() + 1e-12)


def _template(side):
    """Healthy knee-like template shared by every image of a corpus."""
    rng = np.random.default_rng(20240917)
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64) / side
    img = np.full((side, side), 0.12)
    gap_centre = 0.5
    # femoral condyles: two rounded lobes above the gap
    for cx in (0.33, 0.67):
        lobe = ((cols - cx) / 0.2) ** 2 + ((rows - (gap_centre - 0.16)) / 0.14) ** 2 < 1.0
        img[lobe] = 0.62
    img[(rows < gap_centre - 0.16) & (np.abs(cols - 0.5) < 0.36)] = 0.62
    # tibial plateau below the gap
    img[(rows > gap_centre + 0.06) & (np.abs(cols - 0.5) < 0.4)] = 0.58
    texture = _smooth_noise(rng, side, max(side / 48.0, 0.7))
    bone = img > 0.3
    img[bone] += 0.06 * texture[bone]
    return img


# (row, col) anchors on the joint margins, one per osteophyte region
_REGION_ANCHORS = ((0.40, 0.16), (0.40, 0.84), (0.60, 0.13), (0.60, 0.87))


def _synthesise(side, grade, patient_params, rng):
    shift_r, shift_c, gain, gap_scale = patient_params
    img = _template(side).copy()
    img = ndimage.shift(img, (shift_r * side, shift_c * side), order=1, mode="nearest")
    img *= gain
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64) / side

    jsn = {0: (0, 0), 1: (0, 0), 2: (1, 0), 3: (2, 1), 4: (3, 2)}[grade]
    # narrowing: bone encroaches on the gap, medial more than lateral;
    # grade 1 gets a doubtful (sub-grade) narrowing that is not labelled
    visual = (0.75, 0) if grade == 1 else jsn
    for compartment, level in zip((0.33, 0.67), visual):
        if level:
            width = 0.04 * level * gap_scale
            band = (np.abs(rows - 0.5 - shift_r) < width) & (np.abs(cols - compartment - shift_c) < 0.13)
            img[band] = np.maximum(img[band], 0.55 * gain)

    ost = [0, 0, 0, 0]
    spur_grade = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3}[grade]
    n_spurs = grade
    if grade == 1 and rng.uniform() < 0.3:
        # some doubtful knees carry two small spurs, positive under OARSI only
        n_spurs = 2
    for k in range(n_spurs):
        region = k % 4
        r0, c0 = _REGION_ANCHORS[region]
        r0 += shift_r + rng.uniform(-0.02, 0.02)
        c0 += shift_c + rng.uniform(-0.02, 0.02)
        radius = 0.05 + 0.025 * grade
        blob = ((rows - r0) ** 2 + (cols - c0) ** 2) < radius ** 2
        img[blob] = 0.95
        ost[region] = max(ost[region], spur_grade)

    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0), jsn, ost


def _add_implant(img, rng):
    side = img.shape[0]
    h = max(2, int(0.3 * side))
    w = max(1, int(0.05 * side))
    r = int(rng.integers(0, side - h))
    c = int(rng.integers(int(0.3 * side), int(0.7 * side) - w))
    img[r:r + h, c:c + w] = 1.0


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write a procedurally generated graded corpus and its manifest.

    Grade-0 images perturb one shared textured template per patient; grade g
    adds g osteophyte-like spurs whose size grows with g, plus joint-space
    narrowing from grade 2 on.  Both knees of a patient share a grade and
    patient-level jitter, and splits are assigned per patient, per grade.
    """
    if spec.image_side < MIN_IMAGE_SIDE:
        raise ConfigError(f"image_side={spec.image_side} below minimum {MIN_IMAGE_SIDE}")
    counts = spec.counts()
    if not math.isclose(sum(spec.split_fractions), 1.0):
        raise ConfigError("split_fractions must sum to 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    side = spec.image_side

    samples = []
    implants = []
    for grade in spec.grades:
        n = counts[grade]
        n_patients = (n + 1) // 2
        order = rng.permutation(n_patients)
        n_test = int(round(spec.split_fractions[2] * n_patients))
        n_val = int(round(spec.split_fractions[1] * n_patients))
        split_of = {}
        for rank, p in enumerate(order):
            split_of[p] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
        for p in range(n_patients):
            pid = f"g{grade}p{p:04d}"
            params = (rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01),
                      rng.uniform(0.98, 1.02), rng.uniform(0.9, 1.1))
            for side_name in SIDES[: min(2, n - 2 * p)]:
                img, jsn, ost = _synthesise(side, grade, params, rng)
                if side_name == "right":
                    img = img[:, ::-1]
                ref = f"images/{pid}_{side_name}.png"
                if rng.random() < spec.implant_rate:
                    _add_implant(img, rng)
                    implants.append(ref)
                ost_grades = tuple(ost)
                if grade <= 1 and jsn == (0, 0) and rng.random() < spec.missing_osteophyte_rate:
                    ost_grades = (None, None, None, None)
                Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(out_dir / ref)
                samples.append(Sample(image_ref=ref, patient_id=pid, knee_side=side_name,
                                      split=split_of[p], kl_grade=grade, jsn_medial=jsn[0],
                                      jsn_lateral=jsn[1], osteophyte_grades=ost_grades))
    manifest = Manifest(samples=tuple(samples), image_side=side, source="synthetic", root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    with open(out_dir / "corpus_info.json", "w") as fh:
        json.dump({"implants": implants, "counts": {str(g): c for g, c in counts.items()},
                   "image_side": side, "rng_seed": spec.rng_seed}, fh, indent=2, sort_keys=True)
    return manifest


# --------------------------------------------------------------------------
# OAI adapter

# Baseline semi-quantitative readings file: column -> manifest field.
OAI_COLUMN_MAP = {
    "ID": "patient_id",
    "SIDE": "knee_side",
    "V00XRKL": "kl",
    "V00XRJSM": "jsn_med",
    "V00XRJSL": "jsn_lat",
    "V00XROSFM": "ost_mdf",
    "V00XROSFL": "ost_ldf",
    "V00XROSTM": "ost_mpt",
    "V00XROSTL": "ost_lpt",
}


def _oai_value(text):
    # OAI exports encode grades as "2: 2" or plain "2"; "." and "" mean missing
    text = (text or "").strip()
    if text in ("", ".") or text.startswith(".:"):
        return ""
    head = text.split(":")[0].strip()
    try:
        return str(int(float(head)))
    except ValueError:
        return ""


def _oai_side(text):
    text = (text or "").strip().lower()
    if text.startswith("1") or text.startswith("r"):
        return "right"
    if text.startswith("2") or text.startswith("l"):
        return "left"
    raise ManifestError(f"unrecognised SIDE value {text!r}")


def assign_patient_splits(patient_ids, fractions=(0.6, 0.1, 0.3), seed=0) -> dict:
    """Deterministic patient-level split assignment."""
    patients = sorted(set(patient_ids))
    order = np.random.default_rng(seed).permutation(len(patients))
    n_train = int(round(fractions[0] * len(patients)))
    n_val = int(round(fractions[1] * len(patients)))
    out = {}
    for rank, i in enumerate(order):
        out[patients[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def convert_oai_table(table_path, out_path, image_pattern="images/{patient_id}_{knee_side}.png",
                      split_column=None, fractions=(0.6, 0.1, 0.3), seed=0, delimiter="|",
                      image_side=224) -> Manifest:
    """Build a manifest from an OAI semi-quantitative readings export.

    Columns are mapped by ``OAI_COLUMN_MAP``.  When ``split_column`` names a
    column its values are used as splits, otherwise patients are split with
    ``assign_patient_splits``.
    """
    with open(table_path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter=delimiter))
    if not rows:
        warnings.warn(f"OAI table {table_path} is empty", stacklevel=2)
    upper = {k.upper(): k for k in (rows[0].keys() if rows else [])}
    for col in OAI_COLUMN_MAP:
        if rows and col not in upper:
            raise ManifestError(f"OAI table lacks column {col}", row=0)
    splits = None
    if split_column is None:
        splits = assign_patient_splits([r[upper["ID"]].strip() for r in rows], fractions, seed)
    samples = []
    for row_no, r in enumerate(rows, start=1):
        pid = r[upper["ID"]].strip()
        try:
            side = _oai_side(r[upper["SIDE"]])
        except ManifestError as exc:
            raise ManifestError(str(exc), row=row_no) from None
        fields = {OAI_COLUMN_MAP[c]: _oai_value(r[upper[c]]) for c in OAI_COLUMN_MAP
                  if c not in ("ID", "SIDE")}
        split = r[split_column].strip().lower() if split_column else splits[pid]
        grade = lambda k: int(fields[k]) if fields[k] else None  # noqa: E731
        samples.append(Sample(
            image_ref=image_pattern.format(patient_id=pid, knee_side=side),
            patient_id=pid, knee_side=side, split=split, kl_grade=grade("kl"),
            jsn_medial=grade("jsn_med"), jsn_lateral=grade("jsn_lat"),
            osteophyte_grades=tuple(grade(c) for c in OSTEOPHYTE_COLUMNS)))
    manifest = Manifest(samples=tuple(samples), image_side=image_side, source="oai",
                        root=Path(out_path).parent)
    write_manifest(manifest, out_path)
    return manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
