"""Resumable staged runs: synth -> train_cls -> masks -> train_dense -> convert
-> score -> eval -> plot.

Each stage owns a slice of the config.  Its hash covers that slice plus the
hashes of the stages it reads from, so a config edit invalidates exactly
the stages downstream of it.  Each completion also gets a fresh token, and
downstream stages record the tokens they consumed; if an upstream stage is
recomputed (say, after its artifact was deleted) everything below it is
stale too even though the hashes still agree.

Layout of a run directory::

    config.yaml  manifest.json  report.json
    datasets/<split>/   checkpoints/*.npz   masks/   scores/<scorer>.csv
    plots/*.png
"""

from __future__ import annotations

import csv
import json
import logging
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data_synth, metrics, model as mdl, pseudo_mask, scoring
from .config import RunConfig, digest, dump_config, to_dict
from .errors import DependencyError, StaleArtifactError

log = logging.getLogger(__name__)

STAGES = ("synth", "train_cls", "masks", "train_dense", "convert", "score", "eval", "plot")
DEPENDS = {
    "synth": (),
    "train_cls": ("synth",),
    "masks": ("synth", "train_cls"),
    "train_dense": ("synth", "train_cls", "masks"),
    "convert": ("train_dense",),
    "score": ("synth", "train_cls", "convert"),
    "eval": ("masks", "score"),
    "plot": ("eval",),
}
EVAL_SPLITS = ("ood_semantic", "ood_domain", "ood_both")
UNION_SPLIT = "ood_semantic+ood_domain"
SCORE_SPLITS = ("id_test",) + EVAL_SPLITS
SCORE_COLUMNS = ("example_id", "split", "S_h", "S_d", "S", "S_h_vanilla", "scorer",
                 "temperature", "domain_floor")
MANIFEST = "manifest.json"
REPORT = "report.json"


def _dataset_dirs(cfg):
    return {tag: f"datasets/{tag}" for tag in data_synth.SPLIT_TAGS}


ARTIFACTS = {
    "synth": lambda cfg: sorted(_dataset_dirs(cfg).values()),
    "train_cls": lambda cfg: ["checkpoints/classifier.npz", "checkpoints/classifier_loss.json"],
    "masks": lambda cfg: ["masks/manifest.json"],
    "train_dense": lambda cfg: ["checkpoints/dense.npz", "checkpoints/dense_loss.json"],
    "convert": lambda cfg: ["checkpoints/converted.npz"],
    "score": lambda cfg: [f"scores/{s.kind}.csv" for s in cfg.scorers] + ["scores/logits.npz"],
    "eval": lambda cfg: [REPORT],
    "plot": lambda cfg: ["plots/summary_table.png"],
}


def stage_section(cfg: RunConfig, stage: str):
    """The part of the (resolved) config that a stage's outputs depend on."""
    if stage == "synth":
        return {"dataset": cfg.dataset, "n_ood": cfg.n_ood,
                "ood_domain_empty_fraction": cfg.ood_domain_empty_fraction}
    if stage == "train_cls":
        return {"classifier": cfg.classifier}
    if stage == "masks":
        return {"masks": cfg.masks}
    if stage == "train_dense":
        return {"dense": cfg.dense}
    if stage == "convert":
        return {}
    if stage == "score":
        return {"scorers": cfg.scorers, "fusion": cfg.fusion}
    if stage == "eval":
        return {"temperature_sweep": cfg.temperature_sweep, "tpr_level": cfg.tpr_level,
                "histogram_scorer": cfg.histogram_scorer, "histogram_bins": cfg.histogram_bins}
    if stage == "plot":
        return {}
    raise KeyError(stage)


def stage_hashes(cfg: RunConfig):
    """Chained per-stage config hashes."""
    out = {}
    for stage in STAGES:
        section = to_dict(stage_section(cfg, stage))
        out[stage] = digest({"stage": stage, "section": section,
                             "upstream": [out[d] for d in DEPENDS[stage]]})
    return out


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class Run:
    cfg: RunConfig
    root: Path

    @property
    def manifest_path(self):
        return self.root / MANIFEST

    def load_manifest(self):
        try:
            return json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError):
            return {"stages": {}}

    def save_manifest(self, manifest):
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        tmp.replace(self.manifest_path)

    def path(self, rel):
        return self.root / rel


def open_run(cfg: RunConfig, root=None) -> Run:
    cfg = cfg.validate().resolved()
    return Run(cfg, Path(root if root is not None else cfg.output_dir))


def stage_status(run: Run, stage: str, manifest=None, hashes=None):
    """``"ok"``, ``"missing"`` or ``"stale"``."""
    manifest = manifest or run.load_manifest()
    hashes = hashes or stage_hashes(run.cfg)
    rec = manifest["stages"].get(stage)
    if not rec or not rec.get("complete"):
        return "missing"
    if not all(run.path(a).exists() for a in rec.get("artifacts", [])):
        return "missing"
    if rec.get("config_hash") != hashes[stage]:
        return "stale"
    for dep in DEPENDS[stage]:
        dep_rec = manifest["stages"].get(dep) or {}
        if rec.get("upstream", {}).get(dep) != dep_rec.get("token"):
            return "stale"
    return "ok"


def status(run: Run):
    manifest, hashes = run.load_manifest(), stage_hashes(run.cfg)
    return {s: stage_status(run, s, manifest, hashes) for s in STAGES}


def _check_deps(run: Run, stage: str):
    manifest, hashes = run.load_manifest(), stage_hashes(run.cfg)
    for dep in DEPENDS[stage]:
        st = stage_status(run, dep, manifest, hashes)
        if st == "missing":
            raise DependencyError(f"stage {stage!r} needs stage {dep!r}, which has not completed")
        if st == "stale":
            raise StaleArtifactError(
                f"stage {stage!r} needs stage {dep!r}, whose artifacts do not match the current config")


def run_stage(run: Run, stage: str, force=False):
    """Run one stage if it is not already up to date.  Returns True if it ran."""
    if stage not in STAGES:
        raise KeyError(f"unknown stage {stage!r}")
    _check_deps(run, stage)
    if not force and stage_status(run, stage) == "ok":
        log.info("stage %s is up to date", stage)
        return False
    run.root.mkdir(parents=True, exist_ok=True)
    dump_config(run.cfg, run.root / "config.yaml")
    mdl.set_determinism(run.cfg.deterministic)
    t0 = time.time()
    log.info("running stage %s", stage)
    _RUNNERS[stage](run)
    manifest = run.load_manifest()
    manifest["stages"][stage] = {
        "complete": True,
        "config_hash": stage_hashes(run.cfg)[stage],
        "artifacts": ARTIFACTS[stage](run.cfg),
        "token": uuid.uuid4().hex,
        "upstream": {d: manifest["stages"][d]["token"] for d in DEPENDS[stage]},
        "finished_at": time.time(),
        "seconds": round(time.time() - t0, 3),
    }
    run.save_manifest(manifest)
    return True


def run_all(run: Run, force_stage=None):
    """Run every stage that is missing or stale, in order; returns the report."""
    executed = []
    for stage in STAGES:
        if run_stage(run, stage, force=(stage == force_stage)):
            executed.append(stage)
    run.executed = executed
    report = load_report(run)
    print(format_summary(report))
    return report


def load_report(run: Run):
    return json.loads(run.path(REPORT).read_text())


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _load_split(run, tag):
    return data_synth.load_example_set(run.path(f"datasets/{tag}"))


def stage_synth(run: Run):
    cfg = run.cfg
    train, test = data_synth.gen_id_dataset(cfg.dataset)
    sets = {"id_train": train, "id_test": test}
    for kind in data_synth.OOD_KINDS:
        frac = cfg.ood_domain_empty_fraction if kind == "domain" else 0.0
        sets[f"ood_{kind}"] = data_synth.gen_ood_dataset(kind, cfg.dataset, cfg.n_ood, frac)
    for tag, rel in _dataset_dirs(cfg).items():
        data_synth.save_example_set(sets[tag], run.path(rel), cfg.dataset)


def _save_loss(path, history):
    Path(path).write_text(json.dumps([float(v) for v in history]))


def stage_train_cls(run: Run):
    cfg = run.cfg
    train = _load_split(run, "id_train")
    model = mdl.train_classifier(train, cfg.classifier, cfg.dataset.num_classes,
                                 cfg.dataset.image_size)
    mdl.save_checkpoint(model, run.path("checkpoints/classifier.npz"), cfg.classifier)
    _save_loss(run.path("checkpoints/classifier_loss.json"), model.loss_history)


def stage_masks(run: Run):
    cfg = run.cfg
    train = _load_split(run, "id_train")
    model = mdl.load_checkpoint(run.path("checkpoints/classifier.npz"), expect_mode=mdl.K_CLASS)
    masks, _ = pseudo_mask.generate_pseudo_masks(model, train, cfg.masks)
    truth = train.masks()
    iou = float(np.mean([pseudo_mask.mask_iou(p, t) for p, t in zip(masks, truth)]))
    fg = float(truth.mean())
    stats = {"mean_iou": iou, "mean_true_fg_fraction": fg, "iou_margin": iou - fg,
             "mean_pseudo_fg_fraction": float(masks.mean())}
    pseudo_mask.save_masks(run.path("masks"), train.ids(), masks, train.labels(),
                           cfg.dataset.num_classes, cfg.masks, stats)


def stage_train_dense(run: Run):
    cfg = run.cfg
    train = _load_split(run, "id_train")
    ids, _, label_maps, _ = pseudo_mask.load_masks(run.path("masks"))
    if ids != train.ids():
        raise StaleArtifactError("pseudo-mask ids do not match the training set")
    init = mdl.load_checkpoint(run.path("checkpoints/classifier.npz"), expect_mode=mdl.K_CLASS)
    model = mdl.train_dense(init, train, label_maps, cfg.dense, cfg.dataset.num_classes)
    mdl.save_checkpoint(model, run.path("checkpoints/dense.npz"), cfg.dense)
    _save_loss(run.path("checkpoints/dense_loss.json"), model.loss_history)


def stage_convert(run: Run):
    dense = mdl.load_checkpoint(run.path("checkpoints/dense.npz"), expect_mode=mdl.K_PLUS_1)
    converted = mdl.convert_dense_to_classifier(dense)
    mdl.save_checkpoint(converted, run.path("checkpoints/converted.npz"), dense.config)


def _fit_vim(model, train_images, spec, K):
    W, b = (t.detach().numpy() for t in model.classifier_weights())
    feats = mdl.pooled_features(model, train_images)
    return scoring.fit_vim(feats, W[:K], b[:K], spec.vim_dim)


def stage_score(run: Run):
    cfg = run.cfg
    K = cfg.dataset.num_classes
    conv = mdl.load_checkpoint(run.path("checkpoints/converted.npz"), expect_mode=mdl.K_PLUS_1)
    vanilla = mdl.load_checkpoint(run.path("checkpoints/classifier.npz"), expect_mode=mdl.K_CLASS)
    sets = {tag: _load_split(run, tag) for tag in SCORE_SPLITS}
    images = {tag: s.images() for tag, s in sets.items()}
    logits_c = {tag: mdl.forward_global(conv, x) for tag, x in images.items()}
    logits_v = {tag: mdl.forward_global(vanilla, x) for tag, x in images.items()}
    run.path("scores").mkdir(parents=True, exist_ok=True)
    np.savez(run.path("scores/logits.npz"),
             **{f"converted/{t}": v for t, v in logits_c.items()},
             **{f"vanilla/{t}": v for t, v in logits_v.items()},
             id_test_labels=sets["id_test"].labels())

    train_images = None
    vim_c = vim_v = None
    for spec in cfg.scorers:
        if spec.kind == "vim":
            train_images = _load_split(run, "id_train").images()
            vim_c = _fit_vim(conv, train_images, spec, K)
            vim_v = _fit_vim(vanilla, train_images, spec, K)
        rows = []
        for tag in SCORE_SPLITS:
            feats_c = feats_v = None
            if spec.kind == "vim":
                feats_c = mdl.pooled_features(conv, images[tag])
                feats_v = mdl.pooled_features(vanilla, images[tag])
            s_h = scoring.semantic_scores(spec, logits_c[tag], K, feats_c, vim_c, conv, images[tag])
            s_v = scoring.semantic_scores(spec, logits_v[tag], K, feats_v, vim_v, vanilla,
                                          images[tag])
            s_d = scoring.domain_score(logits_c[tag], K)
            s = scoring.fuse(s_h, s_d, spec.value_type, cfg.fusion)
            for eid, a, b, c, d in zip(sets[tag].ids(), s_h, s_d, s, s_v):
                rows.append((eid, tag, repr(float(a)), repr(float(b)), repr(float(c)),
                             repr(float(d)), spec.kind, repr(cfg.fusion.temperature),
                             repr(cfg.fusion.domain_floor)))
        with open(run.path(f"scores/{spec.kind}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_COLUMNS)
            w.writerows(rows)


def read_scores(path):
    """Score CSV -> {split: {"S_h": array, "S_d": ..., "S": ..., "S_h_vanilla": ...}}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["split"], {k: [] for k in ("S_h", "S_d", "S", "S_h_vanilla")})
            for k in d:
                d[k].append(float(row[k]))
    return {tag: {k: np.asarray(v) for k, v in d.items()} for tag, d in out.items()}


def _metric_dict(id_scores, ood_scores, level):
    return metrics.detection_metrics(id_scores, ood_scores, level)


def ood_view(scores, split):
    if split == UNION_SPLIT:
        a, b = scores["ood_semantic"], scores["ood_domain"]
        return {k: np.concatenate([a[k], b[k]]) for k in a}
    return scores[split]


def _shared_histogram(id_scores, ood_scores, bins):
    both = np.concatenate([id_scores, ood_scores])
    lo, hi = float(both.min()), float(both.max())
    edges, id_counts = metrics.histogram(id_scores, bins, (lo, hi))
    _, ood_counts = metrics.histogram(ood_scores, bins, (lo, hi))
    return {"edges": [float(e) for e in edges], "id_counts": [int(c) for c in id_counts],
            "ood_counts": [int(c) for c in ood_counts]}


def build_report(cfg: RunConfig, scores_by_kind, logits, mask_stats):
    """Assemble the evaluation report from per-scorer score tables."""
    K = cfg.dataset.num_classes
    level = cfg.tpr_level
    splits = EVAL_SPLITS + (UNION_SPLIT,)
    kinds = [s.kind for s in cfg.scorers]
    value_types = {s.kind: s.value_type for s in cfg.scorers}
    any_kind = kinds[0]
    id_d = scores_by_kind[any_kind]["id_test"]["S_d"]

    report = {"splits": {}, "temperature_sweep": {}, "clamp_counts": {}, "histograms": {}}
    for split in splits:
        ood_d = ood_view(scores_by_kind[any_kind], split)["S_d"]
        entry = {"n_ood": int(ood_d.size), "domain_only": _metric_dict(id_d, ood_d, level),
                 "scorers": {}}
        sweep = {}
        for kind in kinds:
            sc = scores_by_kind[kind]
            idv, oodv = sc["id_test"], ood_view(sc, split)
            entry["scorers"][kind] = {
                "semantic_only": _metric_dict(idv["S_h"], oodv["S_h"], level),
                "fused": _metric_dict(idv["S"], oodv["S"], level),
                "vanilla": _metric_dict(idv["S_h_vanilla"], oodv["S_h_vanilla"], level),
            }
            curve = []
            for T in cfg.temperature_sweep:
                fc = scoring.FusionConfig(temperature=T, domain_floor=cfg.fusion.domain_floor)
                a = scoring.fuse(idv["S_h"], idv["S_d"], value_types[kind], fc)
                b = scoring.fuse(oodv["S_h"], oodv["S_d"], value_types[kind], fc)
                curve.append({"temperature": float(T), "auroc": metrics.auroc(a, b),
                              "fpr95": metrics.fpr_at_tpr(a, b, level)})
            sweep[kind] = curve
        report["splits"][split] = entry
        report["temperature_sweep"][split] = sweep

        hs = scores_by_kind[cfg.histogram_scorer]
        ood_h = ood_view(hs, split)
        report["histograms"][split] = {
            "scorer": cfg.histogram_scorer,
            "S_h": _shared_histogram(hs["id_test"]["S_h"], ood_h["S_h"], cfg.histogram_bins),
            "S_d": _shared_histogram(hs["id_test"]["S_d"], ood_h["S_d"], cfg.histogram_bins),
        }

    for kind in kinds:
        vt = value_types[kind]
        report["clamp_counts"][kind] = {
            tag: scoring.clamp_count(scores_by_kind[kind][tag]["S_d"], vt, cfg.fusion)
            for tag in SCORE_SPLITS}
    report["clamp_event_count"] = int(sum(sum(v.values()) for v in report["clamp_counts"].values()))

    labels = logits["id_test_labels"]
    acc_c = metrics.top1_accuracy(logits["converted/id_test"], labels, K)
    acc_v = metrics.top1_accuracy(logits["vanilla/id_test"], labels, K)
    report["id_top1_accuracy"] = {"converted": acc_c, "vanilla": acc_v, "drop": acc_v - acc_c,
                                  "n": int(labels.size)}
    report["pseudo_masks"] = dict(mask_stats)
    report["conventions"] = dict(metrics.CONVENTIONS)
    report["conventions"]["tpr_level"] = level
    report["conventions"]["semantic_only"] = (
        "scorer on the first K logits of the converted (K+1) classifier")
    report["conventions"]["vanilla"] = "scorer on the K-class classifier before dense training"
    echo = to_dict(cfg)
    echo.pop("output_dir", None)
    report["config"] = echo
    report["seeds"] = {"global": cfg.seed, "dataset": cfg.dataset.seed,
                       "classifier": cfg.classifier.seed, "dense": cfg.dense.seed}
    report["summary"] = summary_rows(report)
    return report


def summary_rows(report):
    rows = []
    for split, entry in report["splits"].items():
        rows.append({"split": split, "scorer": "DOM", "variant": "domain_only",
                     **entry["domain_only"]})
        for kind, res in entry["scorers"].items():
            for variant in ("semantic_only", "fused", "vanilla"):
                rows.append({"split": split, "scorer": kind, "variant": variant, **res[variant]})
    return rows


def format_summary(report):
    lines = [f"{'split':<26}{'scorer':<10}{'variant':<15}{'FPR95':>8}{'AUROC':>8}{'AUPR':>8}"]
    for r in report["summary"]:
        lines.append(f"{r['split']:<26}{r['scorer']:<10}{r['variant']:<15}"
                     f"{r['fpr95']:>8.3f}{r['auroc']:>8.3f}{r['aupr']:>8.3f}")
    acc = report["id_top1_accuracy"]
    lines.append(f"ID top-1: converted {acc['converted']:.4f}  vanilla {acc['vanilla']:.4f}")
    return "\n".join(lines)


def stage_eval(run: Run):
    cfg = run.cfg
    scores = {s.kind: read_scores(run.path(f"scores/{s.kind}.csv")) for s in cfg.scorers}
    with np.load(run.path("scores/logits.npz")) as z:
        logits = {k: z[k] for k in z.files}
    mask_stats = json.loads(run.path("masks/manifest.json").read_text())["stats"]
    report = build_report(cfg, scores, logits, mask_stats)
    run.path(REPORT).write_text(json.dumps(report, indent=1, sort_keys=True))


def stage_plot(run: Run):
    from .plotting import plot_report

    plot_report(load_report(run), run.path("plots"))


_RUNNERS = {
    "synth": stage_synth,
    "train_cls": stage_train_cls,
    "masks": stage_masks,
    "train_dense": stage_train_dense,
    "convert": stage_convert,
    "score": stage_score,
    "eval": stage_eval,
    "plot": stage_plot,
}
