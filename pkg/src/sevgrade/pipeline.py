"""Stage orchestration: data prep, training, pseudo labels, scoring, evaluation.

Every stage reads its inputs from the run directory and fails with
MissingStageError when an upstream stage has not produced them.  Layout::

    <output_dir>/data/                     prepared corpus + manifest_ref.json
    <output_dir>/runs/<run_id>/stage1/member_<k>/
    <output_dir>/runs/<run_id>/stage2/pseudo_<target>_iter<n>.csv
    <output_dir>/runs/<run_id>/stage3_<sev|oa>/iter_<n>/
    <output_dir>/runs/<run_id>/scores/ metrics/ figures/
    <output_dir>/report/                   aggregated over seeds
"""
import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

import sevgrade
from sevgrade import plots
from sevgrade.config import RunConfig, parse_margin
from sevgrade.dataset import (ImageStore, Manifest, file_digest, generate_synthetic_corpus,
                              load_manifest, sample_training_pool)
from sevgrade.errors import ConfigError, MissingStageError
from sevgrade.evaluation import aggregate, evaluate_scores, write_report
from sevgrade.pseudolabel import (denoise, make_provider, no_denoise, pseudo_label,
                                  read_pseudo_labels, write_pseudo_labels)
from sevgrade.scoring import (ScoreReport, balanced_margin, calibrate_threshold_t, combine,
                              member_score_matrix, score_dcrl, score_ssl, votes_from_scores,
                              write_scores)
from sevgrade.trainer import load_stage, save_stage, train_dcrl, train_ssl_ensemble

LOGGER = logging.getLogger(__name__)


def configure_determinism():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def derived_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def write_provenance(directory, command, cfg: RunConfig, seed=None, **extra):
    payload = {"command": command, "config_hash": cfg.hash(), "profile": cfg.profile,
               "code_version": sevgrade.__version__, "seed": seed,
               "run_id": cfg.run_id(seed) if seed is not None else None, **extra}
    return _write_json(Path(directory) / f"provenance_{command}.json", payload)


# --------------------------------------------------------------------------
# data

def data_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "data"


def _data_hash(cfg):
    return hashlib.sha256(json.dumps(cfg.raw["dataset"], sort_keys=True, default=str).encode()).hexdigest()


def prepare(cfg: RunConfig) -> Manifest:
    """Generate the synthetic corpus or validate the configured manifest."""
    ddir = data_dir(cfg)
    spec = cfg.synthetic_spec()
    if cfg.manifest_path() is not None:
        path = cfg.manifest_path()
        manifest = load_manifest(path)
    elif spec is not None:
        manifest = generate_synthetic_corpus(spec, ddir / "synthetic")
        path = ddir / "synthetic" / "manifest.csv"
    else:
        raise ConfigError("no dataset configured")
    healthy = sum(1 for s in manifest.split("train") if s.kl_grade == 0)
    if healthy < cfg.pool_size:
        LOGGER.warning("only %d healthy training samples for pool_size=%d", healthy, cfg.pool_size)
    _write_json(ddir / "manifest_ref.json", {"manifest": str(Path(path).resolve()),
                                             "sha256": file_digest(path),
                                             "dataset_hash": _data_hash(cfg),
                                             "n_samples": len(manifest)})
    write_provenance(ddir, "prepare", cfg)
    return manifest


def load_data(cfg: RunConfig) -> Manifest:
    ref_path = data_dir(cfg) / "manifest_ref.json"
    if not ref_path.exists():
        raise MissingStageError("prepare", ref_path)
    ref = json.loads(ref_path.read_text())
    if ref["dataset_hash"] != _data_hash(cfg):
        raise MissingStageError("prepare (dataset config changed since last prepare)", ref_path)
    return load_manifest(ref["manifest"])


class Run:
    """One seeded execution of the pipeline under a config."""

    def __init__(self, cfg: RunConfig, seed: int, manifest: Manifest = None):
        self.cfg = cfg
        self.seed = seed
        self.run_id = cfg.run_id(seed)
        self.root = cfg.output_dir / "runs" / self.run_id
        self.manifest = manifest if manifest is not None else load_data(cfg)
        self._stores = {}

    def store(self, side) -> ImageStore:
        if side not in self._stores:
            self._stores[side] = ImageStore(self.manifest, side)
        return self._stores[side]

    # paths
    def stage1_dir(self):
        return self.root / "stage1"

    def stage3_dir(self, target, iteration):
        return self.root / f"stage3_{target}" / f"iter_{iteration}"

    def pseudo_path(self, target, iteration, denoised=True):
        suffix = "" if denoised else "_nodenoise"
        return self.root / "stage2" / f"pseudo_{target}_iter{iteration}{suffix}.csv"

    # data views
    def pool(self):
        return sample_training_pool(self.manifest, self.cfg.pool_size, self.seed)

    def unlabelled(self):
        pool_ids = {s.sample_id for s in self.pool()}
        return [s for s in self.manifest.split("train") if s.sample_id not in pool_ids]

    def eval_samples(self, split=None):
        split = split or self.cfg.eval["split"]
        return [s for s in self.manifest.split(split) if s.kl_grade is not None]

    def images(self, samples, side):
        store = self.store(side)
        return [store[s] for s in samples]

    # ---------------------------------------------------------------- stage 1
    def train_stage1(self, sda=None, directory=None, pool=None):
        directory = Path(directory or self.stage1_dir())
        pool = pool if pool is not None else self.pool()
        s1 = self.cfg.stage1
        train = dataclasses.replace(s1.train, rng_seed=self.seed)
        members = train_ssl_ensemble(
            pool, self.store(s1.encoder.input_side), train, s1.encoder, sda or s1.sda,
            on_member=lambda k, st: save_stage(st, directory / f"member_{k}",
                                               {"member": k, "run_id": self.run_id}))
        _write_json(directory / "members.json", {"K": len(members),
                                                 "pool_ids": [s.sample_id for s in pool]})
        write_provenance(directory, "train-stage1", self.cfg, self.seed)
        return members

    def load_stage1(self, directory=None):
        directory = Path(directory or self.stage1_dir())
        index = directory / "members.json"
        if not index.exists():
            raise MissingStageError("stage1 (train-stage1)", index)
        k = json.loads(index.read_text())["K"]
        return [load_stage(directory / f"member_{i}") for i in range(k)]

    # ---------------------------------------------------------------- stage 2
    def _scorers(self, target, iteration):
        if iteration <= 1:
            return self.load_stage1()
        if target != "oa":
            raise ConfigError("only the OA detector is retrained iteratively")
        prev = self.stage3_dir("oa", iteration - 1)
        if not (prev / "stage.json").exists():
            raise MissingStageError(f"stage3 oa iteration {iteration - 1}", prev)
        return [load_stage(prev)]

    def _margin(self, target, iteration, scores, cd_maxes, m_override=None):
        if m_override is not None:
            return float(m_override)
        spec = self.cfg.stage3.m_oa if target == "oa" else self.cfg.stage3.m_sev
        fixed, count = parse_margin(spec, self.cfg.n_for_iteration(iteration))
        if fixed is not None:
            return fixed
        return balanced_margin(scores, cd_maxes, count)

    def pseudo_label(self, target, iteration=1, m=None, statement=None, percentile=None,
                     denoised=True):
        if target not in ("oa", "sev"):
            raise ConfigError(f"target must be oa or sev, got {target!r}")
        scorers = self._scorers(target, iteration)
        unl = self.unlabelled()
        side = scorers[0].encoder_config.input_side
        scores = member_score_matrix(self.images(unl, side), scorers)
        cd_maxes = [st.cd_max for st in scorers]
        m_used = self._margin(target, iteration, scores, cd_maxes, m)
        train_ids = set().union(*(st.train_ids for st in scorers))
        candidate_ids = set(pseudo_label(unl, scores, cd_maxes, m_used, train_ids))
        candidates = [s for s in unl if s.sample_id in candidate_ids]

        pl = self.cfg.pseudolabel
        statement = statement or pl["statement"]
        q = float(percentile if percentile is not None else pl["percentile"])
        if denoised and pl["provider"] != "none":
            cache = (self.cfg.output_dir / "cache" / f"similarity_{pl['provider']}.csv") if pl.get("cache") else None
            kwargs = {"model_path": pl["model_path"]} if pl["provider"] == "clip" and pl.get("model_path") else {}
            provider = make_provider(pl["provider"], cache, **kwargs)
            labels = denoise(candidates, provider, statement, self.pool(), self.store(side), q, m_used)
        else:
            labels = no_denoise(candidates, m_used)
        path = self.pseudo_path(target, iteration, denoised)
        write_pseudo_labels(labels, self.manifest.by_id(), path)
        write_provenance(path.parent, f"pseudo-label-{target}-iter{iteration}", self.cfg, self.seed,
                         m=m_used, n_candidates=len(candidates), n_accepted=len(labels.accepted))
        LOGGER.info("pseudo labels %s iter %d: m=%.4f candidates=%d accepted=%d",
                    target, iteration, m_used, len(candidates), len(labels.accepted))
        return labels

    # ---------------------------------------------------------------- stage 3
    def stage3_normals(self, iteration):
        pool = self.pool()
        n = self.cfg.n_for_iteration(iteration)
        if n > len(pool):
            raise ConfigError(f"stage3 iteration {iteration} needs {n} normals, pool has {len(pool)}")
        if n == len(pool):
            return pool
        rng = np.random.default_rng(derived_seed(self.seed, "stage3-normals", iteration))
        return [pool[i] for i in np.sort(rng.choice(len(pool), size=n, replace=False))]

    def train_stage3(self, target, iteration=1, denoised=True, directory=None, epoch_callback=None,
                     train_overrides=None):
        if not (self.stage1_dir() / "members.json").exists():
            raise MissingStageError("stage1 (train-stage1)", self.stage1_dir() / "members.json")
        path = self.pseudo_path(target, iteration, denoised)
        if not path.with_suffix(".json").exists():
            raise MissingStageError(f"stage2 (pseudo-label --target {target} --iter {iteration})", path)
        labels = read_pseudo_labels(path)
        if not labels.accepted:
            raise ConfigError(f"no pseudo labels for {target} iteration {iteration}; lower the margin")
        by_id = self.manifest.by_id()
        anoms = [by_id[i] for i in labels.accepted]
        s3 = self.cfg.stage3
        train = s3.train
        if train_overrides:
            train = dataclasses.replace(train, **train_overrides)
        stage = train_dcrl(self.stage3_normals(iteration), anoms, self.store(s3.encoder.input_side),
                           train, s3.encoder, derived_seed(self.seed, "stage3", target, iteration),
                           epoch_callback=epoch_callback)
        if directory is None:
            directory = self.stage3_dir(target, iteration)
        save_stage(stage, directory, {"target": target, "iteration": iteration, "run_id": self.run_id,
                                      "denoised": denoised})
        write_provenance(directory, f"train-stage3-{target}", self.cfg, self.seed, iteration=iteration)
        return stage

    def load_stage3(self, target, iteration):
        d = self.stage3_dir(target, iteration)
        if not (d / "stage.json").exists():
            raise MissingStageError(f"stage3 {target} iteration {iteration} (train-stage3)", d)
        return load_stage(d)

    def final_oa_iteration(self):
        it = 0
        while (self.stage3_dir("oa", it + 1) / "stage.json").exists():
            it += 1
        if it == 0:
            raise MissingStageError("stage3 oa (train-stage3 --target oa)", self.stage3_dir("oa", 1))
        return it

    # ---------------------------------------------------------------- scoring
    def score(self, split=None):
        samples = self.eval_samples(split)
        members = self.load_stage1()
        sev = self.load_stage3("sev", 1)
        final = self.final_oa_iteration()
        oas = [self.load_stage3("oa", i) for i in range(1, final + 1)]
        s1_side = members[0].encoder_config.input_side
        s3_side = sev.encoder_config.input_side

        ssl = np.stack([score_ssl(self.images(samples, s1_side), m) for m in members], axis=1)
        m_oa = read_pseudo_labels(self.pseudo_path("oa", 1)).m_used
        votes = votes_from_scores(ssl, [m.cd_max for m in members], m_oa)
        imgs3 = self.images(samples, s3_side)
        s_sev = score_dcrl(imgs3, sev)
        s_oa = [score_dcrl(imgs3, st) for st in oas]
        t = calibrate_threshold_t(sev, self.images(self.stage3_normals(1), s3_side),
                                  self.cfg.stage3.t_percentile)

        reports, detail = [], []
        for n, s in enumerate(samples):
            comb = [combine(s_sev[n], so[n], t) for so in s_oa]
            reports.append(ScoreReport(sample_id=s.sample_id, s_ssl=float(ssl[n].mean()),
                                       s_sev=float(s_sev[n]), s_oa=float(s_oa[-1][n]),
                                       s_comb=float(comb[-1]), votes=[bool(v) for v in votes[n]]))
            row = {"sample_id": s.sample_id, "s_ssl": float(ssl[n].mean()), "s_sev": float(s_sev[n])}
            row.update({f"s_ssl_member{k}": float(ssl[n, k]) for k in range(ssl.shape[1])})
            row.update({f"s_oa_iter{i + 1}": float(so[n]) for i, so in enumerate(s_oa)})
            row.update({f"s_comb_iter{i + 1}": float(c) for i, c in enumerate(comb)})
            detail.append(row)

        out = self.root / "scores"
        meta = {"run_id": self.run_id, "m": m_oa, "t": t, "oa_iteration": final,
                "split": split or self.cfg.eval["split"]}
        write_scores(reports, out / "scores.csv", meta)
        _write_json(out / "scores_detail.json", {"meta": meta, "rows": detail,
                                                 "stage1_K": ssl.shape[1], "oa_iterations": final})
        write_provenance(out, "score", self.cfg, self.seed)
        return reports, detail, meta

    # ---------------------------------------------------------------- evaluation
    def evaluate(self, figures=True):
        path = self.root / "scores" / "scores_detail.json"
        if not path.exists():
            raise MissingStageError("score", path)
        payload = json.loads(path.read_text())
        rows, k, iters = payload["rows"], payload["stage1_K"], payload["oa_iterations"]
        cutoff = int(self.cfg.eval["gt3_cutoff"])

        def metrics(column):
            return evaluate_scores({r["sample_id"]: r[column] for r in rows}, self.manifest, cutoff)

        results = {"stage1_members": [metrics(f"s_ssl_member{i}") for i in range(k)],
                   "sev": metrics("s_sev")}
        for i in range(1, iters + 1):
            results[f"oa_iter{i}"] = metrics(f"s_oa_iter{i}")
            results[f"comb_iter{i}"] = metrics(f"s_comb_iter{i}")
        report_rows = report_rows_for([results])
        write_report(report_rows, self.root / "metrics", extra={"run_id": self.run_id})
        write_provenance(self.root / "metrics", "evaluate", self.cfg, self.seed)
        if figures:
            plots.score_boxplots(rows, self.manifest, self.root / "figures" / "scores_by_grade.png",
                                 final_column=f"s_comb_iter{iters}")
            members = self.load_stage1()
            curves = {f"DCRL-FS_sev": self.load_stage3("sev", 1).monitor_curve}
            for i in range(1, iters + 1):
                curves[f"DCRL-FS_OA iter{i}"] = self.load_stage3("oa", i).monitor_curve
            plots.training_curves([m.loss_curve for m in members], curves,
                                  self.root / "figures" / "training_curves.png")
        return results


def report_rows_for(results_per_seed):
    """Table rows; stage-1 spread is across ensemble members, others across seeds."""
    first = results_per_seed[0]
    rows = [aggregate("SS-FS", "1", True, [m for r in results_per_seed for m in r["stage1_members"]])]
    iters = sorted(int(k[len("oa_iter"):]) for k in first if k.startswith("oa_iter"))
    rows.append(aggregate("DCRL-FS_OA", "3_iter1", False, [r["oa_iter1"] for r in results_per_seed]))
    rows.append(aggregate("DCRL-FS_sev", "3", False, [r["sev"] for r in results_per_seed]))
    rows.append(aggregate("DCRL-FS_comb", "3_iter1", False, [r["comb_iter1"] for r in results_per_seed]))
    if len(iters) > 1:
        last = iters[-1]
        rows.append(aggregate("DCRL-FS_OA", f"3_iter{last}", False,
                              [r[f"oa_iter{last}"] for r in results_per_seed]))
        rows.append(aggregate("DCRL-FS_comb", f"3_iter{last}", False,
                              [r[f"comb_iter{last}"] for r in results_per_seed]))
    return rows


def run_all(cfg: RunConfig, seeds=None, figures=True):
    """Every stage for every seed, then the cross-seed report."""
    configure_determinism()
    manifest = prepare(cfg)
    all_results = []
    for seed in seeds if seeds is not None else cfg.seeds:
        run = Run(cfg, seed, manifest)
        run.train_stage1()
        run.pseudo_label("sev", 1)
        run.pseudo_label("oa", 1)
        run.train_stage3("sev", 1)
        run.train_stage3("oa", 1)
        for it in range(2, cfg.stage3.iterations + 1):
            labels = run.pseudo_label("oa", it)
            if not labels.accepted:
                LOGGER.warning("no pseudo labels at iteration %d; stopping iterations", it)
                break
            run.train_stage3("oa", it)
        run.score()
        all_results.append(run.evaluate(figures=figures))
    return write_cross_seed_report(cfg, all_results)


def write_cross_seed_report(cfg: RunConfig, results):
    rows = report_rows_for(results)
    out = cfg.output_dir / "report"
    path = write_report(rows, out, extra={"config_hash": cfg.hash(), "seeds": cfg.seeds})
    write_provenance(out, "report", cfg)
    return path


def collect_results(cfg: RunConfig):
    """Re-evaluate every seed that has scores, for the cross-seed report."""
    manifest = load_data(cfg)
    results = []
    for seed in cfg.seeds:
        run = Run(cfg, seed, manifest)
        if (run.root / "scores" / "scores_detail.json").exists():
            results.append(run.evaluate(figures=False))
    if not results:
        raise MissingStageError("score", cfg.output_dir / "runs")
    return results
