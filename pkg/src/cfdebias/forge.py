"""Datasets with a controllable spurious correlation.

Every image belongs to one of four subgroups given by the (disease, artifact)
contingency table. Images are either synthesized at desk scale (smooth
background, a bright blob as the disease marker) or ingested from an external
PNG corpus; in both cases the spurious artifact is a dark disk injected at a
fixed location.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

HEALTHY = "healthy"
SICK = "sick"
DISEASE_LABELS = (HEALTHY, SICK)

# Table order: sick+artifact, sick, healthy+artifact, healthy.
SUBGROUPS = ("majority_S", "minority_S", "minority_H", "majority_H")
SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("id", "path", "disease_label", "artifact_present", "subgroup", "split")


class DatasetError(Exception):
    """Raised when a dataset directory cannot be read back."""


class PlanError(ValueError):
    """Raised when a subgroup plan is inconsistent with the available labels."""


class BoundsError(ValueError):
    """Raised when an artifact would not fit inside the image."""


def subgroup_of(disease_label: str, artifact_present: bool) -> str:
    if disease_label == SICK:
        return "majority_S" if artifact_present else "minority_S"
    if disease_label == HEALTHY:
        return "minority_H" if artifact_present else "majority_H"
    raise ValueError(f"unknown disease label {disease_label!r}")


@dataclass(eq=False)
class ImageRecord:
    id: str
    image: np.ndarray
    disease_label: str
    artifact_present: bool
    subgroup: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self):
        if self.disease_label not in DISEASE_LABELS:
            raise ValueError(f"{self.id}: unknown disease label {self.disease_label!r}")
        self.artifact_present = bool(self.artifact_present)
        expected = subgroup_of(self.disease_label, self.artifact_present)
        if self.subgroup is None:
            self.subgroup = expected
        elif self.subgroup != expected:
            raise ValueError(
                f"{self.id}: subgroup {self.subgroup!r} inconsistent with "
                f"({self.disease_label}, artifact={self.artifact_present})"
            )
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"{self.id}: unknown split {self.split!r}")
        img = np.asarray(self.image)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise ValueError(f"{self.id}: image must be square 2-D, got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")
        self.image = img

    @property
    def label(self) -> int:
        """Disease label as 0 (healthy) / 1 (sick)."""
        return int(self.disease_label == SICK)


@dataclass
class ArtifactSpec:
    shape: str = "disk"
    radius: int = 9
    center: Optional[tuple[int, int]] = None
    intensity: float = 0.0
    # radius < 1 leaves the image untouched instead of painting the center pixel
    degenerate_noop: bool = False

    def __post_init__(self):
        if self.shape != "disk":
            raise ValueError(f"unsupported artifact shape {self.shape!r}")
        if self.radius < 0:
            raise ValueError("artifact radius must be >= 0")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("artifact intensity must lie in [0, 1]")
        if self.center is not None:
            self.center = (int(self.center[0]), int(self.center[1]))

    def resolve_center(self, side: int) -> tuple[int, int]:
        return self.center if self.center is not None else (side // 2, side // 2)


def artifact_mask(shape: tuple[int, int], spec: ArtifactSpec) -> np.ndarray:
    """Boolean mask of the pixels the artifact paints on an image of ``shape``."""
    h, w = shape
    cy, cx = spec.resolve_center(h)
    r = spec.radius
    if cy - r < 0 or cx - r < 0 or cy + r > h - 1 or cx + r > w - 1:
        raise BoundsError(f"disk of radius {r} at {(cy, cx)} exceeds image bounds {shape}")
    if r < 1 and spec.degenerate_noop:
        return np.zeros(shape, dtype=bool)
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def inject_artifact(image: np.ndarray, spec: ArtifactSpec) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"image must be square 2-D, got shape {image.shape}")
    mask = artifact_mask(image.shape, spec)
    out = image.copy()
    out[mask] = spec.intensity
    return out


@dataclass
class DiseaseMarkerSpec:
    """Bright blob standing in for a disease opacity.

    Positions are fractions of the image side. The blob is a flat disk of the
    drawn radius with a one-pixel gaussian rim; ``region_margin`` bounds the rim
    when checking disjointness from the artifact.
    """

    kind: str = "bright_blob"
    row_range: tuple[float, float] = (0.70, 0.86)
    col_range: tuple[float, float] = (0.18, 0.82)
    radius_range: tuple[float, float] = (3.0, 5.0)
    intensity_range: tuple[float, float] = (0.15, 0.30)
    region_margin: float = 2.0
    # background texture
    background_mean: float = 0.45
    background_std: float = 0.07
    background_grid: int = 6
    noise_std: float = 0.04

    def __post_init__(self):
        if self.kind != "bright_blob":
            raise ValueError(f"unsupported marker kind {self.kind!r}")
        for name in ("row_range", "col_range", "radius_range", "intensity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (low, high)")
            setattr(self, name, (float(lo), float(hi)))
        if self.radius_range[0] <= 0 or self.intensity_range[0] <= 0:
            raise ValueError("marker radius and intensity must be positive")


def marker_disjoint_from_artifact(marker: DiseaseMarkerSpec, artifact: ArtifactSpec, side: int) -> bool:
    """True if no admissible blob region can touch the artifact disk."""
    cy, cx = artifact.resolve_center(side)
    reach = marker.radius_range[1] + marker.region_margin
    rows = (marker.row_range[0] * side, marker.row_range[1] * side)
    cols = (marker.col_range[0] * side, marker.col_range[1] * side)
    # closest admissible blob center to the artifact center
    ny = min(max(cy, rows[0]), rows[1])
    nx = min(max(cx, cols[0]), cols[1])
    return math.hypot(ny - cy, nx - cx) > reach + artifact.radius


def _background(rng: np.random.Generator, side: int, spec: DiseaseMarkerSpec) -> np.ndarray:
    coarse = rng.standard_normal((spec.background_grid, spec.background_grid))
    smooth = ndimage.zoom(coarse, side / spec.background_grid, order=3, mode="nearest")[:side, :side]
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
    return spec.background_mean + spec.background_std * smooth


def synthesize_base_image(
    rng: np.random.Generator,
    disease_label: str,
    marker_spec: DiseaseMarkerSpec,
    side: int = 64,
) -> np.ndarray:
    """Draw one grayscale image; sick images get a single bright blob.

    Random draws happen in a fixed order (background, noise, blob) so that a
    healthy and a sick image drawn from identically seeded generators share
    the same background.
    """
    if disease_label not in DISEASE_LABELS:
        raise ValueError(f"unknown disease label {disease_label!r}")
    img = _background(rng, side, marker_spec)
    img = img + marker_spec.noise_std * rng.standard_normal((side, side))
    params = rng.uniform(size=4)
    if disease_label == SICK:
        img = img + _blob(side, marker_spec, params)
    return np.clip(img, 0.0, 1.0)


def _blob(side: int, spec: DiseaseMarkerSpec, u: np.ndarray) -> np.ndarray:
    def lerp(rng_pair, t):
        return rng_pair[0] + (rng_pair[1] - rng_pair[0]) * t

    cy = lerp(spec.row_range, u[0]) * side
    cx = lerp(spec.col_range, u[1]) * side
    r = lerp(spec.radius_range, u[2])
    delta = lerp(spec.intensity_range, u[3])
    yy, xx = np.ogrid[:side, :side]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    rim = np.exp(-0.5 * np.maximum(d - r, 0.0) ** 2)
    rim[d > r + spec.region_margin] = 0.0
    return delta * rim


@dataclass
class SubgroupPlan:
    """Either absolute subgroup counts or per-class artifact prevalences.

    ``counts`` follows the table order (majority_S, minority_S, minority_H,
    majority_H). In prevalence mode the class totals ``n_sick`` and
    ``n_healthy`` are needed to synthesize a dataset but not to assign
    artifacts to an existing label list.
    """

    counts: Optional[tuple[int, int, int, int]] = None
    p_artifact_sick: Optional[float] = None
    p_artifact_healthy: Optional[float] = None
    n_sick: Optional[int] = None
    n_healthy: Optional[int] = None
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.counts is not None:
            self.counts = tuple(int(c) for c in self.counts)
            if len(self.counts) != 4 or min(self.counts) < 0:
                raise PlanError("counts must be four non-negative integers")
        elif self.p_artifact_sick is None or self.p_artifact_healthy is None:
            raise PlanError("plan needs either counts or both prevalences")
        else:
            for p in (self.p_artifact_sick, self.p_artifact_healthy):
                if not 0.0 <= p <= 1.0:
                    raise PlanError(f"prevalence {p} outside [0, 1]")
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        _check_fractions(self.split_fractions)

    @property
    def class_totals(self) -> tuple[int, int]:
        """(n_sick, n_healthy)."""
        if self.counts is not None:
            ms, ns, nh, mh = self.counts
            return ms + ns, nh + mh
        if self.n_sick is None or self.n_healthy is None:
            raise PlanError("prevalence plan needs n_sick and n_healthy to synthesize")
        return int(self.n_sick), int(self.n_healthy)

    def artifact_counts(self, n_sick: int, n_healthy: int) -> tuple[int, int]:
        """Number of sick and healthy images that receive the artifact."""
        if self.counts is not None:
            ms, ns, nh, mh = self.counts
            if ms + ns > n_sick or nh + mh > n_healthy:
                raise PlanError(
                    f"plan asks for {ms + ns} sick / {nh + mh} healthy images, "
                    f"only {n_sick} / {n_healthy} available"
                )
            if ms + ns != n_sick or nh + mh != n_healthy:
                raise PlanError(
                    f"plan totals {ms + ns} sick / {nh + mh} healthy do not match "
                    f"labels {n_sick} / {n_healthy}"
                )
            return ms, nh
        return round_half_even(self.p_artifact_sick, n_sick), round_half_even(self.p_artifact_healthy, n_healthy)

    @classmethod
    def from_dict(cls, d: dict) -> "SubgroupPlan":
        d = dict(d)
        if d.get("counts") is not None:
            d["counts"] = tuple(d["counts"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


def round_half_even(p: float, n: int) -> int:
    """Round p * n to the nearest integer, ties to even, in exact decimal arithmetic."""
    return int((Decimal(repr(float(p))) * n).quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def _check_fractions(fractions: Sequence[float]):
    if len(fractions) != 3 or min(fractions) < 0:
        raise ValueError("split fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {tuple(fractions)} do not sum to 1")


def assign_subgroups(
    labels: Sequence[str], plan: SubgroupPlan, rng: np.random.Generator
) -> list[tuple[bool, str]]:
    labels = list(labels)
    sick_idx = [i for i, lab in enumerate(labels) if lab == SICK]
    healthy_idx = [i for i, lab in enumerate(labels) if lab == HEALTHY]
    if len(sick_idx) + len(healthy_idx) != len(labels):
        raise ValueError("labels must be 'sick' or 'healthy'")
    k_sick, k_healthy = plan.artifact_counts(len(sick_idx), len(healthy_idx))

    artifact = [False] * len(labels)
    for idx, k in ((sick_idx, k_sick), (healthy_idx, k_healthy)):
        if not idx:
            continue
        chosen = rng.permutation(len(idx))[:k]
        for j in chosen:
            artifact[idx[j]] = True
    return [(a, subgroup_of(lab, a)) for lab, a in zip(labels, artifact)]


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items, at least one per non-empty split when n >= 3."""
    exact = [Fraction(repr(float(f))) * n for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    if n >= 3:
        for i in range(3):
            if fractions[i] > 0 and sizes[i] == 0:
                donor = max(range(3), key=lambda j: sizes[j])
                sizes[donor] -= 1
                sizes[i] += 1
    return sizes


def split_dataset(
    records: Sequence[ImageRecord], fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0
) -> list[ImageRecord]:
    """Assign train/val/test stratified by subgroup. Records are updated in place and returned."""
    if not records:
        raise ValueError("cannot split an empty dataset")
    _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    for group in SUBGROUPS:
        members = [r for r in records if r.subgroup == group]
        if not members:
            continue
        perm = rng.permutation(len(members))
        sizes = split_sizes(len(members), fractions)
        bounds = np.cumsum([0] + sizes)
        for split, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            for j in perm[lo:hi]:
                members[j].split = split
    return list(records)


def build_synthetic_dataset(
    plan: SubgroupPlan,
    artifact: ArtifactSpec,
    marker: DiseaseMarkerSpec,
    side: int = 64,
) -> list[ImageRecord]:
    """Synthesize a full desk-scale dataset with subgroups and splits assigned."""
    n_sick, n_healthy = plan.class_totals
    labels = [SICK] * n_sick + [HEALTHY] * n_healthy
    root = np.random.SeedSequence(plan.seed)
    assign_seq, image_seq, split_seq = root.spawn(3)
    groups = assign_subgroups(labels, plan, np.random.default_rng(assign_seq))
    image_rngs = image_seq.spawn(len(labels))

    records = []
    for i, (label, (has_artifact, group)) in enumerate(zip(labels, groups)):
        img = synthesize_base_image(np.random.default_rng(image_rngs[i]), label, marker, side)
        if has_artifact:
            img = inject_artifact(img, artifact)
        records.append(ImageRecord(f"img{i:05d}", img, label, has_artifact, group))
    split_seed = int(split_seq.generate_state(1)[0])
    return split_dataset(records, plan.split_fractions, split_seed)


def ingest_external(
    image_dir: str | Path,
    labels_csv: str | Path,
    plan: SubgroupPlan,
    artifact: ArtifactSpec,
    side: Optional[int] = None,
) -> list[ImageRecord]:
    """Apply the artifact plan to an external corpus.

    ``labels_csv`` needs columns ``filename`` and ``disease_label``
    (healthy/sick, or 0/1). Images are converted to grayscale and optionally
    resized to ``side`` x ``side``.
    """
    image_dir = Path(image_dir)
    rows = []
    with open(labels_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            lab = row["disease_label"].strip().lower()
            lab = {"0": HEALTHY, "1": SICK}.get(lab, lab)
            rows.append((row["filename"], lab))
    missing = [fn for fn, _ in rows if not (image_dir / fn).is_file()]
    if missing:
        raise DatasetError(f"missing images: {', '.join(missing)}")

    root = np.random.SeedSequence(plan.seed)
    assign_seq, split_seq = root.spawn(2)
    groups = assign_subgroups([lab for _, lab in rows], plan, np.random.default_rng(assign_seq))
    records = []
    for (fn, lab), (has_artifact, group) in zip(rows, groups):
        with Image.open(image_dir / fn) as im:
            im = im.convert("L")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float64) / 255.0
        if has_artifact:
            img = inject_artifact(img, artifact)
        records.append(ImageRecord(Path(fn).stem, img, lab, has_artifact, group))
    split_seed = int(split_seq.generate_state(1)[0])
    return split_dataset(records, plan.split_fractions, split_seed)


def _to_png(path: Path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_manifest(records: Iterable[ImageRecord], directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            rel = f"images/{r.id}.png"
            _to_png(directory / rel, r.image)
            writer.writerow(
                [r.id, rel, r.disease_label, str(r.artifact_present).lower(), r.subgroup, r.split or ""]
            )
    return manifest


def load_manifest(directory: str | Path) -> list[ImageRecord]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {directory}")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != MANIFEST_HEADER:
            raise DatasetError(f"unexpected manifest header {header}")
        rows = list(reader)

    records, bad = [], []
    for row in rows:
        rid, rel, label, artifact, group, split = row
        try:
            with Image.open(directory / rel) as im:
                img = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except (OSError, ValueError):
            bad.append(rid)
            continue
        records.append(ImageRecord(rid, img, label, artifact == "true", group, split or None))
    if bad:
        raise DatasetError(f"missing or unreadable images for ids: {', '.join(bad)}")
    return records


@dataclass
class ForgeConfig:
    """JSON-serializable bundle of everything needed to synthesize a dataset."""

    plan: SubgroupPlan = field(default_factory=lambda: SubgroupPlan(p_artifact_sick=0.9, p_artifact_healthy=0.1,
                                                                    n_sick=1500, n_healthy=1500))
    artifact: ArtifactSpec = field(default_factory=lambda: ArtifactSpec(radius=3))
    marker: DiseaseMarkerSpec = field(default_factory=DiseaseMarkerSpec)
    side: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "ForgeConfig":
        kw = {}
        if "plan" in d:
            kw["plan"] = SubgroupPlan.from_dict(d["plan"])
        if "artifact" in d:
            a = dict(d["artifact"])
            if a.get("center") is not None:
                a["center"] = tuple(a["center"])
            kw["artifact"] = ArtifactSpec(**a)
        if "marker" in d:
            kw["marker"] = DiseaseMarkerSpec(**d["marker"])
        if "side" in d:
            kw["side"] = int(d["side"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path: str | Path) -> "ForgeConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)
