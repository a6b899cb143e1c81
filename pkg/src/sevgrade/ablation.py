"""Ablation presets: anomaly transforms, training-set size, denoising, early stopping.

Each preset writes ``<output_dir>/ablation/<preset>/`` containing a json report,
a plain-text table and, where it has one, a figure.
"""
import dataclasses
import logging

import numpy as np

from sevgrade import plots
from sevgrade.config import RunConfig
from sevgrade.dataset import sample_training_pool
from sevgrade.encoder import encode_batch
from sevgrade.errors import ConfigError
from sevgrade.evaluation import METRIC_NAMES, aggregate, evaluate_scores, write_report
from sevgrade.pipeline import Run, derived_seed, load_data, write_provenance, _write_json
from sevgrade.scoring import dcrl_score_from_embedding, score_dcrl, score_ssl
from sevgrade.trainer import plateau_reached, train_ssl_member

LOGGER = logging.getLogger(__name__)

PRESETS = ("t_anom_transforms", "trainset_size", "no_clip", "early_stopping_trace")

TRANSFORM_LABELS = {"posterise": "Posterise", "rotate": "Rotate", "crop_resize": "Crop",
                    "cutpaste": "CutPaste", "identity": "Identity"}


def _gt3_label(cutoff):
    return f"AUC_KL_g>{cutoff}"


def _metrics(samples, scores, manifest, cutoff):
    return evaluate_scores({s.sample_id: float(v) for s, v in zip(samples, scores)}, manifest, cutoff)


def t_anom_transforms(cfg: RunConfig, runs, out):
    """Stage 1 retrained once per set of anomaly transforms, scored on the validation split."""
    cutoff = int(cfg.ablation.get("gt3_cutoff_t_anom", 2))
    rows = []
    for names in cfg.ablation["t_anom_sets"]:
        sda = dataclasses.replace(cfg.stage1.sda, t_anom=tuple(names)).validate()
        slug = "+".join(names)
        reports = []
        for run in runs:
            members = run.train_stage1(sda=sda, directory=out / slug / f"seed_{run.seed}")
            val = run.eval_samples("val")
            imgs = run.images(val, cfg.stage1.encoder.input_side)
            reports.extend(_metrics(val, score_ssl(imgs, m), run.manifest, cutoff) for m in members)
        label = " + ".join(TRANSFORM_LABELS.get(n, n) for n in names)
        rows.append(aggregate(label, "1", True, reports))
    return write_report(rows, out, "t_anom_transforms", {"split": "val", "gt3_cutoff": cutoff},
                        gt3_label=_gt3_label(cutoff))


def trainset_size(cfg: RunConfig, runs, out, figures=True):
    """Ensembles of members on disjoint subsets; size = members x samples per member."""
    member_n = int(cfg.ablation.get("trainset_member_n") or cfg.stage1.train.N)
    sizes = cfg.ablation.get("trainset_sizes") or list(range(member_n, cfg.pool_size + 1, member_n))
    sizes = [int(s) for s in sizes]
    bad = [s for s in sizes if s % member_n or s < member_n]
    if bad:
        raise ConfigError(f"training set sizes {bad} are not multiples of {member_n}")
    cutoff = int(cfg.eval["gt3_cutoff"])
    s1 = cfg.stage1
    train = dataclasses.replace(s1.train, N=member_n)
    per_size = {s: [] for s in sizes}
    for run in runs:
        pool = sample_training_pool(run.manifest, max(sizes), run.seed)
        store = run.store(s1.encoder.input_side)
        members = []
        for k in range(max(sizes) // member_n):
            chunk = pool[k * member_n:(k + 1) * member_n]
            members.append(train_ssl_member(chunk, store, train, s1.encoder, s1.sda,
                                            derived_seed(run.seed, "trainset", k)))
        test = run.eval_samples()
        imgs = run.images(test, s1.encoder.input_side)
        member_scores = np.stack([score_ssl(imgs, m) for m in members], axis=1)
        for size in sizes:
            scores = member_scores[:, :size // member_n].mean(axis=1)
            per_size[size].append(_metrics(test, scores, run.manifest, cutoff))
    rows = [aggregate(f"SS-FS (n={s})", "1", True, per_size[s]) for s in sizes]
    path = write_report(rows, out, "trainset_size", {"sizes": sizes, "member_n": member_n},
                        gt3_label=_gt3_label(cutoff))
    if figures:
        means = {k: [r.mean[k] for r in rows] for k in METRIC_NAMES}
        plots.trainset_size(sizes, means, out / "trainset_size.png")
    return path


def no_clip(cfg: RunConfig, runs, out):
    """OA detector at iteration 1 trained on denoised and on raw pseudo labels."""
    cutoff = int(cfg.eval["gt3_cutoff"])
    side = cfg.stage3.encoder.input_side
    results = {True: [], False: []}
    counts = []
    for run in runs:
        test = run.eval_samples()
        imgs = run.images(test, side)
        for denoised in (True, False):
            labels = run.pseudo_label("oa", 1, denoised=denoised)
            tag = "denoised" if denoised else "raw"
            stage = run.train_stage3("oa", 1, denoised=denoised,
                                     directory=out / f"seed_{run.seed}" / tag)
            results[denoised].append(_metrics(test, score_dcrl(imgs, stage), run.manifest, cutoff))
            counts.append({"seed": run.seed, "denoised": denoised, "accepted": len(labels.accepted),
                           "rejected": len(labels.rejected_by_denoise)})
    rows = [aggregate("DCRL-FS_OA", "3_iter1", False, results[True]),
            aggregate("DCRL-FS_OA (no denoise)", "3_iter1", False, results[False])]
    return write_report(rows, out, "no_clip", {"pseudo_labels": counts}, gt3_label=_gt3_label(cutoff))


def _stop_epoch(monitor, plateau):
    for e in range(1, len(monitor) + 1):
        if plateau_reached(monitor[:e], plateau.window_epochs, plateau.rel_tol, "max"):
            return e
    return None


def early_stopping_trace(cfg: RunConfig, runs, out, figures=True):
    """Per-epoch test metrics of the iteration-1 OA detector, trained without early stopping."""
    cutoff = int(cfg.eval["gt3_cutoff"])
    epochs = int(cfg.ablation["trace_epochs"])
    side = cfg.stage3.encoder.input_side
    traces, centre, stops = [], [], []
    for run in runs:
        if not run.pseudo_path("oa", 1).with_suffix(".json").exists():
            run.pseudo_label("oa", 1)
        test = run.eval_samples()
        imgs = run.images(test, side)
        trace = []

        def on_epoch(epoch, encoder, c_norm, c_anom):
            emb = encode_batch(imgs, encoder)
            scores = [dcrl_score_from_embedding(e, c_norm, c_anom) for e in emb]
            trace.append(_metrics(test, scores, run.manifest, cutoff).as_dict())

        stage = run.train_stage3("oa", 1, directory=out / f"seed_{run.seed}", epoch_callback=on_epoch,
                                 train_overrides={"early_stopping": False, "max_epochs": epochs})
        traces.append(trace)
        centre.append(stage.monitor_curve)
        stops.append(_stop_epoch(stage.monitor_curve, cfg.stage3.train.plateau))

    axis = list(range(1, epochs + 1))
    mean_metrics = {k: [float(np.mean([t[e][k] for t in traces])) for e in range(epochs)]
                    for k in METRIC_NAMES}
    mean_centre = [float(np.mean([c[e] for c in centre])) for e in range(epochs)]
    fired = [s for s in stops if s is not None]
    stop = float(np.mean(fired)) if fired else None
    payload = {"epochs": axis, "metrics": mean_metrics, "centre_distance": mean_centre,
               "stop_epoch_mean": stop, "stop_epoch_per_seed": stops, "seeds": [r.seed for r in runs]}
    path = _write_json(out / "early_stopping_trace.json", payload)

    header = ["epoch", *METRIC_NAMES, "centre_cd"]
    lines = ["\t".join(header)]
    for e in range(epochs):
        cells = [str(axis[e])] + [f"{mean_metrics[k][e]:.4f}" for k in METRIC_NAMES]
        lines.append("\t".join(cells + [f"{mean_centre[e]:.6f}"]))
    lines.append(f"# plateau stop epoch: {'none' if stop is None else f'{stop:g}'}")
    (out / "early_stopping_trace.txt").write_text("\n".join(lines) + "\n")
    if figures:
        plots.early_stopping_trace(axis, mean_metrics, mean_centre, stop, out / "early_stopping_trace.png")
    return path


def run_ablation(cfg: RunConfig, preset: str, seeds=None, figures=True):
    if preset not in PRESETS:
        raise ConfigError(f"unknown ablation preset {preset!r}; choose from {', '.join(PRESETS)}")
    manifest = load_data(cfg)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    runs = [Run(cfg, seed, manifest) for seed in seeds]
    out = cfg.output_dir / "ablation" / preset
    out.mkdir(parents=True, exist_ok=True)
    if preset == "t_anom_transforms":
        path = t_anom_transforms(cfg, runs, out)
    elif preset == "trainset_size":
        path = trainset_size(cfg, runs, out, figures)
    elif preset == "no_clip":
        path = no_clip(cfg, runs, out)
    else:
        path = early_stopping_trace(cfg, runs, out, figures)
    write_provenance(out, f"ablation-{preset}", cfg, seeds=seeds)
    LOGGER.info("ablation %s written to %s", preset, path)
    return path
