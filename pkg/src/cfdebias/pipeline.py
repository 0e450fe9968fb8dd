"""Staged experiment runner: forge -> classifiers -> detector -> GANs -> evaluation -> report.

Every stage owns one directory under the run directory and writes a ``DONE``
marker (config hash + wall-clock) when it finishes. A stage whose marker
carries the current config hash is skipped on rerun.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import classifiers as clf
from .counterfactual import (
    CounterfactualPair,
    GANConfig,
    difference_heatmap,
    load_bundle,
    region_mass,
    save_bundle,
    train_counterfactual_gan,
    translate,
    write_counterfactual,
)
from .forge import SUBGROUPS, ForgeConfig, artifact_mask, build_synthetic_dataset, ingest_external, load_manifest, write_manifest
from .metrics import DEFINITIONS, METRICS, aggregate, probability_gap, read_pair_records, ssim_batch, write_aggregate_csv, write_pair_records

logger = logging.getLogger(__name__)

STAGES = ("forge", "erm", "dro", "detector", "gan_erm", "gan_dro", "evaluate", "report")
CLASSIFIER_STAGES = ("erm", "dro", "detector")
METHODS = ("erm", "dro")
DONE = "DONE"
PANEL_ROWS = ("factual", "erm_cf", "erm_heatmap", "dro_cf", "dro_heatmap")
PANEL_GROUPS = ("majority_S", "minority_H")


class ConfigError(ValueError):
    """The experiment config does not match the schema or references missing paths."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# Leaky activations keep input gradients alive on images without the pattern a
# classifier detects; input noise keeps the disease classifiers from being
# flipped by faint low-amplitude patterns. Both push counterfactual edits
# towards real image content.
DESK_ARCH = {"name": "small_cnn", "width": 16, "depth": 4, "negative_slope": 0.05}


def _default_erm():
    return clf.TrainConfig(epochs=15, patience=8, noise_std=0.1, arch=dict(DESK_ARCH))


def _default_dro():
    return clf.TrainConfig(epochs=30, patience=10, noise_std=0.1, arch=dict(DESK_ARCH))


def _default_detector():
    return clf.TrainConfig(epochs=12, patience=4, arch=dict(DESK_ARCH))


@dataclass
class ExperimentConfig:
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    external: Optional[dict] = None  # {"image_dir": ..., "labels_csv": ...}
    erm: clf.TrainConfig = field(default_factory=_default_erm)
    dro: clf.TrainConfig = field(default_factory=_default_dro)
    detector: clf.TrainConfig = field(default_factory=_default_detector)
    gan: GANConfig = field(default_factory=GANConfig)
    seed: int = 0
    deterministic: bool = False
    out: str = "runs/desk"
    dataset_name: str = "desk"
    panel_cases: int = 4

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.panel_cases < 1:
            raise ConfigError("panel_cases must be positive")
        if self.external is not None:
            missing = [k for k in ("image_dir", "labels_csv") if k not in self.external]
            if missing:
                raise ConfigError(f"external corpus config lacks {missing}")

    def resolved(self) -> "ExperimentConfig":
        """Copy with the top-level seed pushed into every component."""
        cfg = copy.deepcopy(self)
        cfg.forge.plan.seed = cfg.seed
        for part in (cfg.erm, cfg.dro, cfg.detector, cfg.gan):
            part.seed = cfg.seed
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forge"] = self.forge.to_dict()
        return d

    def config_hash(self) -> str:
        d = self.resolved().to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def check_paths(self):
        if self.external is None:
            return
        for key in ("image_dir", "labels_csv"):
            if not Path(self.external[key]).exists():
                raise ConfigError(f"external.{key} does not exist: {self.external[key]}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "forge" in kw:
                kw["forge"] = ForgeConfig.from_dict(kw["forge"])
            for name in CLASSIFIER_STAGES:
                if name in kw:
                    base = asdict(cls.__dataclass_fields__[name].default_factory())
                    kw[name] = clf.TrainConfig.from_dict({**base, **kw[name]})
            if "gan" in kw:
                kw["gan"] = GANConfig.from_dict(kw["gan"])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class RunManifest:
    config_hash: str
    paths: dict
    stage_seconds: dict
    version: str

    def to_dict(self) -> dict:
        return asdict(self)


def software_version() -> str:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return f"artifact {pkg}; torch {torch.__version__}; numpy {np.__version__}"


def configure_determinism(deterministic: bool):
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


# --- run directory helpers --------------------------------------------------

class RunDir:
    def __init__(self, config: ExperimentConfig):
        self.config = config.resolved()
        self.root = Path(config.out)
        self.hash = config.config_hash()

    def stage(self, name: str) -> Path:
        return self.root / name

    def is_done(self, name: str) -> bool:
        marker = self.stage(name) / DONE
        if not marker.exists():
            return False
        try:
            return json.loads(marker.read_text()).get("config_hash") == self.hash
        except json.JSONDecodeError:
            return False

    def mark_done(self, name: str, seconds: float):
        (self.stage(name) / DONE).write_text(json.dumps(
            {"stage": name, "config_hash": self.hash, "seconds": round(seconds, 3)}, indent=2))

    def seconds(self, name: str) -> Optional[float]:
        marker = self.stage(name) / DONE
        return json.loads(marker.read_text())["seconds"] if marker.exists() else None

    def require(self, stage: str, *names: str):
        missing = [n for n in names if not self.is_done(n)]
        if missing:
            raise StageError(stage, f"missing outputs of stage(s): {', '.join(missing)}")

    def records(self):
        return load_manifest(self.stage("forge"))

    def classifier_path(self, name: str) -> Path:
        return self.stage(name) / f"{name}.pt"

    def bundle_path(self, method: str) -> Path:
        return self.stage(f"gan_{method}") / "bundle.pt"


def _split(records, name):
    return [r for r in records if r.split == name]


def _run_stage(run: RunDir, name: str, fn, force: bool = False):
    if not force and run.is_done(name):
        logger.info("stage %s already complete, skipping", name)
        return
    dest = run.stage(name)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / DONE).unlink(missing_ok=True)
    logger.info("stage %s: start", name)
    t0 = time.perf_counter()
    try:
        fn(run, dest)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised tagged with the stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    run.mark_done(name, time.perf_counter() - t0)
    logger.info("stage %s: done in %.1fs", name, run.seconds(name))


# --- stages -----------------------------------------------------------------

def stage_forge(run: RunDir, dest: Path):
    cfg = run.config
    if cfg.external is not None:
        records = ingest_external(cfg.external["image_dir"], cfg.external["labels_csv"],
                                  cfg.forge.plan, cfg.forge.artifact, cfg.forge.side)
    else:
        records = build_synthetic_dataset(cfg.forge.plan, cfg.forge.artifact, cfg.forge.marker, cfg.forge.side)
    write_manifest(records, dest)
    (dest / "forge_config.json").write_text(json.dumps(cfg.forge.to_dict(), indent=2, sort_keys=True))


_TRAINERS = {"erm": clf.train_erm, "dro": clf.train_group_dro, "detector": clf.train_artifact_detector}


def stage_classifier(name: str):
    def run_it(run: RunDir, dest: Path):
        run.require(name, "forge")
        records = run.records()
        train, val = _split(records, "train"), _split(records, "val")
        config = getattr(run.config, name)
        history: list = []
        model = _TRAINERS[name](train, val, config, history=history)
        extra = {"history": history}
        if name == "detector":
            # d shares f's train/val/test split
            extra["test_auc"] = clf.detector_auc(model, _split(records, "test"))
            extra["split"] = "same 70/10/20 split as the disease classifiers"
        clf.save_classifier(run.classifier_path(name), model, config, extra)
        (dest / "history.json").write_text(json.dumps(history, indent=2))
    return run_it


def stage_gan(method: str, classifier_path: Optional[Path] = None):
    def run_it(run: RunDir, dest: Path):
        stage = f"gan_{method}"
        run.require(stage, "forge")
        path = Path(classifier_path) if classifier_path is not None else run.classifier_path(method)
        if classifier_path is None:
            run.require(stage, method)
        f = clf.load_classifier(path)
        train = _split(run.records(), "train")
        healthy = [r for r in train if r.label == 0]
        sick = [r for r in train if r.label == 1]
        bundle = train_counterfactual_gan(healthy, sick, f, run.config.gan, checkpoint_dir=dest / "epochs")
        save_bundle(run.bundle_path(method), bundle)
        (dest / "history.json").write_text(json.dumps(bundle.history, indent=2))
    return run_it


def panel_cases(items, n: int, seed: int) -> list:
    """Fixed-seed choice of n majority_S and n minority_H ids from (id, subgroup) items."""
    rng = np.random.default_rng(seed)
    items = dict(items)
    chosen = []
    for group in PANEL_GROUPS:
        ids = sorted(i for i, g in items.items() if g == group)
        k = min(n, len(ids))
        chosen += [ids[i] for i in sorted(rng.choice(len(ids), size=k, replace=False))] if k else []
    return chosen


def stage_evaluate(run: RunDir, dest: Path):
    run.require("evaluate", "forge", *CLASSIFIER_STAGES, "gan_erm", "gan_dro")
    cfg = run.config
    test = _split(run.records(), "test")
    if not test:
        raise StageError("evaluate", "test split is empty")
    x = np.stack([r.image for r in test])
    detector = clf.load_classifier(run.classifier_path("detector"))
    d_x = clf.predict_proba(detector, x)
    mask = artifact_mask(x.shape[1:], cfg.forge.artifact)
    cases = set(panel_cases([(r.id, r.subgroup) for r in test], cfg.panel_cases, cfg.seed))

    pairs = []
    for method in METHODS:
        f = clf.load_classifier(run.classifier_path(method))
        clf.evaluate_by_subgroup(f, test).to_json(dest / f"performance_{method}.json")
        bundle = load_bundle(run.bundle_path(method), f)
        x_cf, is_sick, f_x, f_cf = translate(bundle, x)
        d_cf = clf.predict_proba(detector, x_cf)
        ssims = ssim_batch(x, x_cf)
        cpgs, sclss = probability_gap(f_x, f_cf), probability_gap(d_x, d_cf)
        np.savez_compressed(dest / f"counterfactuals_{method}.npz",
                            ids=np.array([r.id for r in test]), x_cf=x_cf.astype(np.float32))
        for i, r in enumerate(test):
            pair = CounterfactualPair(x[i], x_cf[i], "sick->healthy" if is_sick[i] else "healthy->sick",
                                      float(f_x[i]), float(f_cf[i]))
            pairs.append({
                "id": r.id,
                "classifier": method,
                "dataset": cfg.dataset_name,
                "subgroup": r.subgroup,
                "direction": pair.direction,
                "f_x": pair.f_x,
                "f_x_cf": pair.f_x_cf,
                "d_x": float(d_x[i]),
                "d_x_cf": float(d_cf[i]),
                "actionability": float(100.0 * np.abs(x[i] - x_cf[i]).mean()),
                "ssim": float(ssims[i]),
                "cpg": float(cpgs[i]),
                "scls": float(sclss[i]),
                "region_mass": region_mass(difference_heatmap(pair), mask),
            })
            if r.id in cases:
                write_counterfactual(dest / "examples" / method, r.id, pair)
    write_pair_records(pairs, dest / "pairs.jsonl")
    (dest / "detector.json").write_text(json.dumps({
        "test_auc": clf.detector_auc(detector, test),
        "split": "same 70/10/20 split as the disease classifiers",
    }, indent=2))


# --- report -----------------------------------------------------------------

PERF_HEADER = ("classifier", "subgroup", "accuracy", "precision", "recall", "f1", "support")


def _fmt(v) -> str:
    if v is None:
        return ""
    # round before formatting so tiny negatives do not print as -0.000000
    return f"{round(v, 6) + 0.0:.6f}" if isinstance(v, float) else str(v)


def _save_png(path: Path, img: np.ndarray):
    from PIL import Image

    Image.fromarray(np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8), mode="L").save(path)


def _bar_chart(perf: dict, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.38
    xs = np.arange(len(SUBGROUPS))
    for k, method in enumerate(METHODS):
        accs = [(perf[method]["per_group"][g] or {}).get("accuracy", np.nan) for g in SUBGROUPS]
        ax.bar(xs + (k - 0.5) * width, accs, width, label=method.upper())
    ax.set_xticks(xs, SUBGROUPS)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(run_dir: str | Path, config: Optional[ExperimentConfig] = None) -> Path:
    """Write aggregate tables, the subgroup chart, qualitative panels and a provenance file."""
    run_dir = Path(run_dir)
    ev = run_dir / "evaluate"
    needed = [ev / "pairs.jsonl", ev / "performance_erm.json", ev / "performance_dro.json", ev / "detector.json"]
    missing = [str(p.relative_to(run_dir)) for p in needed if not p.exists()]
    if missing:
        raise StageError("report", f"missing evaluation outputs: {', '.join(missing)}")
    pairs = read_pair_records(ev / "pairs.jsonl")
    if not pairs:
        raise StageError("report", "no test pairs to report on")
    if config is None:
        config = ExperimentConfig.from_json(run_dir / "config.json")
    cfg = config.resolved()
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    rows = aggregate(pairs, keys=("classifier", "dataset"), metrics=METRICS)
    write_aggregate_csv(rows, out / "aggregate.csv")

    perf = {m: json.loads((ev / f"performance_{m}.json").read_text()) for m in METHODS}
    with open(out / "subgroup_performance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PERF_HEADER)
        for method in METHODS:
            for g in SUBGROUPS:
                m = perf[method]["per_group"].get(g)
                w.writerow([method, g] + ([_fmt(m[k]) for k in PERF_HEADER[2:]] if m else [""] * 5))
            w.writerow([method, "worst_group", _fmt(perf[method]["worst_group_accuracy"]), "", "", "", ""])
            w.writerow([method, "overall", _fmt(perf[method]["overall_accuracy"]), "", "", "", _fmt(perf[method]["n"])])
    _bar_chart(perf, out / "subgroup_performance.png")

    # qualitative panels: one file per (case, row)
    panels = out / "panels"
    panels.mkdir(exist_ok=True)
    by_key = {(p["classifier"], p["id"]): p for p in pairs}
    cases = panel_cases([(p["id"], p["subgroup"]) for p in pairs], cfg.panel_cases, cfg.seed)
    cfs = {m: np.load(ev / f"counterfactuals_{m}.npz") for m in METHODS if (ev / f"counterfactuals_{m}.npz").exists()}
    if len(cfs) == len(METHODS) and cases:
        images = {r.id: r.image for r in load_manifest(run_dir / "forge") if r.id in cases}
        for case in cases:
            x = images[case]
            tiles = {"factual": x}
            for m in METHODS:
                ids = list(cfs[m]["ids"])
                x_cf = cfs[m]["x_cf"][ids.index(case)].astype(np.float64)
                p = by_key[(m, case)]
                pair = CounterfactualPair(x, x_cf, p["direction"], p["f_x"], p["f_x_cf"])
                tiles[f"{m}_cf"] = x_cf
                tiles[f"{m}_heatmap"] = difference_heatmap(pair)
            for row in PANEL_ROWS:
                _save_png(panels / f"{case}_{row}.png", tiles[row])

    def mean(method, metric, subgroup=None):
        vals = [p[metric] for p in pairs if p["classifier"] == method and (subgroup is None or p["subgroup"] == subgroup)]
        return float(np.mean(vals)) if vals else None

    scls = {m: mean(m, "scls") for m in METHODS}
    gap = scls["erm"] - scls["dro"] if None not in scls.values() else None
    gap_line = (f"SCLS gap (ERM - DRO) = {_fmt(gap)} (ERM {_fmt(scls['erm'])}, DRO {_fmt(scls['dro'])})"
                if gap is not None else "SCLS gap unavailable: pairs for both classifiers are required")
    (out / "scls_gap.txt").write_text(gap_line + "\n")

    detector = json.loads((ev / "detector.json").read_text())
    report = {
        "config_hash": config.config_hash(),
        "version": software_version(),
        "dataset": cfg.dataset_name,
        "loss_weights": cfg.gan.loss_weights,
        "metric_definitions": DEFINITIONS,
        "detector": detector,
        "scls_gap": gap,
        "scls": scls,
        "region_mass_majority_S": {m: mean(m, "region_mass", "majority_S") for m in METHODS},
        "worst_group_accuracy": {m: perf[m]["worst_group_accuracy"] for m in METHODS},
        "panel_cases": cases,
        "panel_rows": list(PANEL_ROWS),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return out


def stage_report(run: RunDir, dest: Path):
    run.require("report", "evaluate")
    emit_report(run.root, run.config)


STAGE_FUNCS = {
    "forge": stage_forge,
    **{name: stage_classifier(name) for name in CLASSIFIER_STAGES},
    "gan_erm": stage_gan("erm"),
    "gan_dro": stage_gan("dro"),
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def prepare(config: ExperimentConfig) -> RunDir:
    config.check_paths()
    configure_determinism(config.deterministic)
    run = RunDir(config)
    run.root.mkdir(parents=True, exist_ok=True)
    (run.root / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True, default=list))
    return run


def run_stage(config: ExperimentConfig, name: str, force: bool = False, fn=None) -> RunDir:
    if name not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}")
    run = prepare(config)
    _run_stage(run, name, fn or STAGE_FUNCS[name], force=force)
    return run


def write_run_manifest(run: RunDir) -> RunManifest:
    paths = {
        "config": "config.json",
        "manifest": "forge/manifest.csv",
        **{f"checkpoint_{n}": str(run.classifier_path(n).relative_to(run.root)) for n in CLASSIFIER_STAGES},
        **{f"bundle_{m}": str(run.bundle_path(m).relative_to(run.root)) for m in METHODS},
        "pairs": "evaluate/pairs.jsonl",
        "aggregate_csv": "report/aggregate.csv",
        "subgroup_csv": "report/subgroup_performance.csv",
        "subgroup_chart": "report/subgroup_performance.png",
        "panels": "report/panels",
        "scls_gap": "report/scls_gap.txt",
        "report": "report/report.json",
    }
    missing = [p for p in paths.values() if not (run.root / p).exists()]
    if missing:
        raise StageError("manifest", f"declared outputs missing: {', '.join(missing)}")
    manifest = RunManifest(
        config_hash=run.hash,
        paths=paths,
        stage_seconds={s: run.seconds(s) for s in STAGES},
        version=software_version(),
    )
    (run.root / "run_manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest


def run_pipeline(config: ExperimentConfig) -> RunManifest:
    """Run every stage in order, skipping the ones already complete for this config."""
    run = prepare(config)
    for name in STAGES:
        _run_stage(run, name, STAGE_FUNCS[name])
    return write_run_manifest(run)
