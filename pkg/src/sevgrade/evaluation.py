"""AUROC for the OA detection tasks and rank correlation with KL grade."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from sevgrade.dataset import Manifest, diagnose_oarsi
from sevgrade.errors import LabelError, ManifestError, MetricUndefinedError
from sevgrade.scoring import read_scores

LOGGER = logging.getLogger(__name__)

METRIC_NAMES = ("auc_kl", "auc_oarsi", "auc_kl_gt3", "src_kl")


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(scores)  # mid-ranks
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def spearman(scores, grades) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(grades, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("scores and grades differ in length")
    if x.size < 3:
        raise MetricUndefinedError("Spearman correlation needs at least 3 points")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        raise MetricUndefinedError("Spearman correlation undefined for a constant ranking")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


@dataclass
class MetricsReport:
    auc_kl: float
    auc_oarsi: float
    auc_kl_gt3: float
    src_kl: float
    n: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def evaluate_scores(scores: dict, manifest: Manifest, gt3_cutoff: int = 3) -> MetricsReport:
    """Four metrics for ``scores`` (sample_id -> score) against manifest labels.

    Positives: KL >= 2; OARSI diagnosis; KL > ``gt3_cutoff``.  Samples whose
    OARSI label cannot be resolved are left out of that AUC only.
    """
    by_id = manifest.by_id()
    unknown = sorted(set(scores) - set(by_id))
    if unknown:
        raise ManifestError(f"{len(unknown)} scored ids not in manifest: {unknown[:5]}")
    ids = [sid for sid in sorted(scores) if by_id[sid].kl_grade is not None]
    s = np.array([scores[i] for i in ids], dtype=np.float64)
    kl = np.array([by_id[i].kl_grade for i in ids])

    oarsi_ids, oarsi_labels = [], []
    for k, sid in enumerate(ids):
        try:
            oarsi_labels.append(diagnose_oarsi(by_id[sid]))
            oarsi_ids.append(k)
        except LabelError:
            pass
    excluded = len(ids) - len(oarsi_ids)
    if excluded:
        LOGGER.warning("%d samples without a resolvable OARSI label left out of auc_oarsi", excluded)
    return MetricsReport(
        auc_kl=auroc(s, kl >= 2),
        auc_oarsi=auroc(s[oarsi_ids], np.array(oarsi_labels, dtype=bool)),
        auc_kl_gt3=auroc(s, kl > gt3_cutoff),
        src_kl=spearman(s, kl),
        n={"total": len(ids), "oa_kl": int((kl >= 2).sum()), "oa_oarsi": int(sum(oarsi_labels)),
           "kl_gt3": int((kl > gt3_cutoff).sum()), "oarsi_excluded": excluded},
    )


def evaluate_run(score_file, manifest: Manifest, column: str = "s_comb",
                 gt3_cutoff: int = 3) -> MetricsReport:
    _, rows = read_scores(score_file)
    scores = {r["sample_id"]: r[column] for r in rows if r.get(column) is not None}
    return evaluate_scores(scores, manifest, gt3_cutoff)


@dataclass
class ReportRow:
    method: str
    stage: str
    patches: Optional[bool]
    mean: dict
    std: dict
    per_run: list = field(default_factory=list)


def aggregate(method, stage, patches, reports) -> ReportRow:
    """Mean and one (population) standard deviation across runs or members."""
    per = [r.as_dict() for r in reports]
    mean = {k: float(np.mean([p[k] for p in per])) for k in METRIC_NAMES}
    std = {k: float(np.std([p[k] for p in per])) for k in METRIC_NAMES}
    return ReportRow(method=method, stage=stage, patches=patches, mean=mean, std=std, per_run=per)


def format_table(rows, gt3_label="AUC_KL_g>3") -> str:
    """Plain-text table: AUCs in percent, SRC as a coefficient."""
    header = ["Method", "Stage", "Patches", "AUC_KL", "AUC_O", gt3_label, "SRC_KL"]
    body = []
    for r in rows:
        patches = "-" if r.patches is None else ("yes" if r.patches else "no")
        cells = [r.method, r.stage, patches]
        for k in ("auc_kl", "auc_oarsi", "auc_kl_gt3"):
            cells.append(f"{100 * r.mean[k]:.1f} ± {100 * r.std[k]:.1f}")
        cells.append(f"{r.mean['src_kl']:.3f} ± {r.std['src_kl']:.3f}")
        body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [line(header), "  ".join("-" * w for w in widths)]
    out.extend(line(b) for b in body)
    return "\n".join(out) + "\n"


def write_report(rows, directory, name="metrics", extra: Optional[dict] = None, gt3_label="AUC_KL_g>3"):
    """Write ``<name>.json`` and ``<name>.txt``; content depends only on the rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"rows": [asdict(r) for r in rows], **(extra or {})}
    for suffix, text in ((".json", json.dumps(payload, indent=2, sort_keys=True) + "\n"),
                         (".txt", format_table(rows, gt3_label))):
        path = directory / f"{name}{suffix}"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    return directory / f"{name}.json"
