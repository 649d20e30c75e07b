"""Ablation grid over the loss/augmentation flags on a generated phantom corpus.

Letters: R = rectified flow, A = paired augmentation, I = endpoint image loss,
T1 = Lyapunov-guided distillation, T2 = plain tangent distillation,
W = resection-aware weighting of the image loss.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .diffeo import TeacherTrajectory
from .losses import resection_weight
from .metrics import METRIC_FIELDS, MetricRow, evaluate_pair, summarize
from .ode import infer
from .phantom import Manifest, load_variant
from .registration import RegistrationConfig, fit_teacher
from .trainer import Dataset, make_net, train
from .volume import write_vol

log = logging.getLogger(__name__)

FLAG_NAMES = ("use_rf", "use_lyap", "use_mse_distill", "use_img", "use_weight_W", "use_aug")


def flags(rf=False, t1=False, t2=False, i=False, w=False, a=False):
    return dict(zip(FLAG_NAMES, (rf, t1, t2, i, w, a)))


GRID = {
    "R": flags(rf=True),
    "T1": flags(t1=True),
    "R+T1": flags(rf=True, t1=True),
    "R+T2": flags(rf=True, t2=True),
    "R+A": flags(rf=True, a=True),
    "R+A+I": flags(rf=True, a=True, i=True),
    "R+A+I+T1": flags(rf=True, a=True, i=True, t1=True),
    "R+A+I+T1+W": flags(rf=True, a=True, i=True, t1=True, w=True),
}


@dataclass
class AblationSettings:
    seeds: tuple = (0, 1, 2)
    n_variants: int = 41
    fractions: tuple = (0.7, 0.15, 0.15)
    teacher_iters: int = 60
    configs: tuple = tuple(GRID)


def teacher_path(teachers_dir, pid, vid):
    return os.path.join(teachers_dir, pid, f"{vid}_svf.vol")


def fit_corpus_teachers(corpus_dir, teachers_dir, manifest, n_variants, iters=60, sigma_vox=6.0, tau_hu=300.0):
    """Fit (or reuse cached) teacher SVFs for the first ``n_variants`` of every phantom."""
    done = 0
    for p in manifest.phantoms:
        for variant in p["variants"][:n_variants]:
            path = teacher_path(teachers_dir, p["id"], variant["id"])
            if os.path.exists(path):
                continue
            pair = load_variant(corpus_dir, p, variant)
            W = resection_weight(pair.x_d5, sigma_vox, tau_hu, pair.plane).W
            svf, rep = fit_teacher(pair.x_d5, pair.x_y1, RegistrationConfig(iters=iters, weight_map=W))
            os.makedirs(os.path.dirname(path), exist_ok=True)
            d5_path = os.path.join(corpus_dir, p["id"], f"{variant['id']}_d5.vol")
            TeacherTrajectory(svf, pair.x_d5).save(path, os.path.abspath(d5_path))
            with open(path + ".report.json", "w") as fh:
                json.dump(rep.as_dict(), fh)
            done += 1
    return done


def load_split(corpus_dir, manifest, n_variants):
    """``Dataset`` plus the test originals for a manifest with splits assigned."""
    train_set, val, test = {}, [], []
    for p in manifest.phantoms:
        if p["split"] == "train":
            train_set[p["id"]] = [load_variant(corpus_dir, p, v) for v in p["variants"][:n_variants]]
        else:
            sample = load_variant(corpus_dir, p, p["variants"][0])
            (val if p["split"] == "val" else test).append((p["id"], sample))
    return Dataset(train_set, [s for _, s in val]), test


def load_teachers(teachers_dir, dataset, manifest):
    by_id = {p["id"]: p for p in manifest.phantoms}
    teachers = {}
    for pid, variants in dataset.train.items():
        for idx, pair in enumerate(variants):
            vid = by_id[pid]["variants"][idx]["id"]
            teachers[(pid, idx)] = TeacherTrajectory.load(teacher_path(teachers_dir, pid, vid), base=pair.x_d5)
    return teachers


def run_one(name, base_cfg, seed, corpus_dir, teachers_dir, manifest, settings, out_dir):
    """Train one grid configuration on one seeded split; return per-test-phantom metric rows."""
    cfg = replace(base_cfg, seed=seed, **GRID[name])
    split = manifest.resplit(seed, settings.fractions)
    dataset, test = load_split(corpus_dir, split, settings.n_variants)
    teachers = load_teachers(teachers_dir, dataset, split) if cfg.uses_teacher else {}
    net = make_net(cfg)
    run_dir = os.path.join(out_dir, name, f"seed{seed}")
    t0 = time.time()
    result = train(net, dataset, teachers, cfg, out_dir=run_dir)
    net.params = result.best_params
    rows = {}
    for pid, sample in test:
        pred = infer(net, sample.x_d5)
        rows[pid] = asdict(evaluate_pair(pred, sample.x_y1))
    record = {
        "config": name,
        "seed": seed,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "val_metric": result.best_metric,
        "wall_s": time.time() - t0,
        "test": rows,
    }
    with open(os.path.join(run_dir, "test_metrics.json"), "w") as fh:
        json.dump(record, fh, indent=1, default=float)
    return record


def baseline_rows(corpus_dir, teachers_dir, manifest, seed, settings):
    """Identity (predict Day-5) and teacher-endpoint rows on a seed's test phantoms."""
    split = manifest.resplit(seed, settings.fractions)
    out = {"identity": {}, "teacher": {}}
    for p in split.phantoms:
        if p["split"] != "test":
            continue
        sample = load_variant(corpus_dir, p, p["variants"][0])
        out["identity"][p["id"]] = asdict(evaluate_pair(sample.x_d5, sample.x_y1))
        teacher = TeacherTrajectory.load(teacher_path(teachers_dir, p["id"], p["variants"][0]["id"]), base=sample.x_d5)
        out["teacher"][p["id"]] = asdict(evaluate_pair(teacher.state(1.0), sample.x_y1))
    return out


def run_grid(corpus_dir, teachers_dir, out_dir, base_cfg, settings=None, resume=True):
    """Run every configuration x seed (reusing finished runs) and write ``ablation.json``."""
    settings = settings or AblationSettings()
    manifest = Manifest.load(os.path.join(corpus_dir, "manifest.json"))
    os.makedirs(out_dir, exist_ok=True)
    fit_corpus_teachers(
        corpus_dir, teachers_dir, manifest, settings.n_variants, settings.teacher_iters,
        base_cfg.sigma_vox, base_cfg.tau_hu,
    )
    records = []
    for name in settings.configs:
        for seed in settings.seeds:
            done = os.path.join(out_dir, name, f"seed{seed}", "test_metrics.json")
            if resume and os.path.exists(done):
                with open(done) as fh:
                    records.append(json.load(fh))
                continue
            log.info("running %s seed %d", name, seed)
            records.append(run_one(name, base_cfg, seed, corpus_dir, teachers_dir, manifest, settings, out_dir))
    baselines = {seed: baseline_rows(corpus_dir, teachers_dir, manifest, seed, settings) for seed in settings.seeds}
    report = {
        "settings": asdict(settings),
        "train_config": asdict(base_cfg),
        "runs": records,
        "baselines": {str(k): v for k, v in baselines.items()},
        "metric_config": "bone MAE masked on truth > 300 HU; mid slab = central 12 slices along axis 0",
    }
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(report, fh, indent=1, default=float)
    return report


def config_means(report, metric="mid_mae_bone"):
    """Per configuration: list over seeds of the mean test metric."""
    out = {}
    for run in report["runs"]:
        vals = [row[metric] for row in run["test"].values() if np.isfinite(row[metric])]
        out.setdefault(run["config"], []).append(float(np.mean(vals)))
    return out


ORDER_CHECKS = (
    ("R+A+I+T1+W", "<=", "R+A+I+T1"),
    ("R+A+I+T1", "<", "R+A+I"),
    ("R+A+I", "<", "R+A"),
    ("R+T1", "<", "R+T2"),
    ("R+T2", "<", "R"),
)


def check_ordering(report, margin=0.05, metric="mid_mae_bone"):
    """Evaluate the directional claims; strict ones need a relative ``margin`` of the larger value."""
    means = {k: float(np.mean(v)) for k, v in config_means(report, metric).items()}
    results = []
    for a, op, b in ORDER_CHECKS:
        if a not in means or b not in means:
            results.append((a, op, b, None, None, False))
            continue
        ma, mb = means[a], means[b]
        ok = ma <= mb if op == "<=" else ma < mb and (mb - ma) >= margin * max(ma, mb)
        results.append((a, op, b, ma, mb, ok))
    return results


def summary_table(report):
    """Rows of ``name, mean +- std (over seeds)`` for each metric field."""
    lines = ["config," + ",".join(METRIC_FIELDS)]
    by_cfg = {}
    for run in report["runs"]:
        by_cfg.setdefault(run["config"], []).extend(run["test"].values())
    for seed_rows in report.get("baselines", {}).values():
        for kind, rows in seed_rows.items():
            by_cfg.setdefault(kind, []).extend(rows.values())
    for name, rows in by_cfg.items():
        mean, std = summarize([MetricRow(**r) for r in rows])
        lines.append(name + "," + ",".join(f"{mean[f]:.2f}+-{std[f]:.2f}" for f in METRIC_FIELDS))
    return lines


def write_predictions(net, samples, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for pid, sample in samples:
        write_vol(os.path.join(out_dir, f"{pid}_pred.vol"), infer(net, sample.x_d5))

