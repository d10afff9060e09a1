"""Synthetic verification world.

A fixed, fully documented ground-truth SCM over the eight covariates drives a
2D slice renderer that produces FLAIR-like phantoms: bright skull rim, white
matter normalized to mean 1.0, dark ventricles, hyperintense lesion blobs in
a periventricular band. Because every noise draw is stored, the true
counterfactual image under any intervention can be re-rendered exactly, which
is what the learned model is scored against.

The designer equations are log-linear with monotone saturations. They are the
benchmark definition, not estimates of disease biology.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage
from PIL import Image

from .errors import DatasetIOError, InvalidRecordError, RenderError
from .graph import CovariateRecord, Intervention

NUM_SLICES = 60
MAX_BLOBS = 6
LESION_THRESHOLD = 1.3   # 30% above the white-matter mean
MIN_COMPONENT_PX = 3

# designer structural-equation constants (documented benchmark definition)
DEFAULT_COEFFS: dict[str, float] = {
    "a_loc": math.log(45.0), "a_scale": 0.22,
    "s_p": 0.45,
    "d_loc": math.log(4.0), "d_age": 1.4, "d_sex": 0.05, "d_scale": 1.2,
    "d_max_frac_of_age": 0.6,
    "e_loc": math.log(2.2), "e_dur": 0.65, "e_sex": 0.12, "e_scale": 0.30,
    "e_max": 10.0,
    "b_loc": math.log(1400.0), "b_age": -0.35, "b_sex": -0.065,
    "b_scale": 0.035, "b_min": 950.0, "b_max": 1800.0,
    "v_loc": math.log(30.0), "v_age": 1.4, "v_brain": -2.2, "v_scale": 0.30,
    "v_max": 120.0,
    "l_loc": math.log(4.5), "l_dur": 1.1, "l_edss": 0.7, "l_vent": 0.45,
    "l_brain": -1.2, "l_scale": 0.55, "l_max": 90.0,
}

NOISE_NAMES = ("a", "s", "d", "e", "b", "v", "l", "n")


@dataclass
class PhantomConfig:
    image_size: int = 128
    ml_per_px: float | None = None   # within-slice mL per pixel
    noise_std: float = 0.02
    blob_volume_ml: float = 12.0     # one extra blob per this much lesion volume
    lesion_intensity_range: tuple[float, float] = (1.4, 1.8)
    ventricle_intensity: float = 0.2
    angle_jitter: float = 0.1        # radians around the slice-driven layout
    coefficients: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COEFFS))
    seed: int = 0

    def __post_init__(self):
        if self.ml_per_px is None:
            self.ml_per_px = 0.0042 * (128.0 / self.image_size) ** 2
        if self.ml_per_px <= 0:
            raise RenderError("ml_per_px must be positive")

    @property
    def segment_scale(self) -> float:
        """mL of whole-lesion volume per segmented pixel."""
        return NUM_SLICES * self.ml_per_px

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "ml_per_px": self.ml_per_px,
                "noise_std": self.noise_std, "blob_volume_ml": self.blob_volume_ml,
                "lesion_intensity_range": list(self.lesion_intensity_range),
                "ventricle_intensity": self.ventricle_intensity,
                "angle_jitter": self.angle_jitter,
                "coefficients": self.coefficients, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        d["lesion_intensity_range"] = tuple(d.get("lesion_intensity_range", (1.4, 1.8)))
        return cls(**d)


@dataclass
class PhantomRecord:
    covariates: CovariateRecord
    image: np.ndarray                # float32 (H, W)
    lesion_mask: np.ndarray          # bool (H, W)
    ventricle_mask: np.ndarray       # bool (H, W)
    brain_mask: np.ndarray           # bool (H, W)
    exogenous: dict                  # designer noise draws + image_seed


def slice_profile(n: float) -> float:
    """Relative cross-section area of slice ``n`` in the 60-slice pseudo-volume.

    Shaped like a sphere's slice profile and normalized to mean 1, so
    per-slice areas integrate back to the stored volumes.
    """
    centers = (np.arange(NUM_SLICES) + 0.5 - NUM_SLICES / 2) / (NUM_SLICES * 0.6)
    raw = np.sqrt(np.clip(1.0 - centers ** 2, 0.05, None))
    value = math.sqrt(max(1.0 - ((float(n) + 0.5 - NUM_SLICES / 2)
                                 / (NUM_SLICES * 0.6)) ** 2, 0.05))
    return value / raw.mean()


def covariates_from_noise(noise: dict[str, float], config: PhantomConfig,
                          assignments: dict[str, float] | None = None
                          ) -> CovariateRecord:
    """Designer equations: noise -> covariates, honoring do() assignments.

    Saturations (caps) are monotone parts of the equations themselves, so the
    same noise always yields the same record.
    """
    co = config.coefficients
    do = assignments or {}

    def held(name, computed):
        return float(do[name]) if name in do else computed

    a = held("a", float(np.clip(math.exp(co["a_loc"] + co["a_scale"] * noise["a"]),
                                18.0, 95.0)))
    s = held("s", 1.0 if noise["s"] < co["s_p"] else 0.0)
    n = held("n", float(math.floor(noise["n"])))
    log_a = math.log(a) - co["a_loc"]
    d_raw = math.exp(co["d_loc"] + co["d_age"] * log_a + co["d_sex"] * s
                     + co["d_scale"] * noise["d"])
    d = held("d", min(d_raw, co["d_max_frac_of_age"] * a))
    log_d = math.log(max(d, 1e-6)) - co["d_loc"]
    e_raw = math.exp(co["e_loc"] + co["e_dur"] * log_d + co["e_sex"] * s
                     + co["e_scale"] * noise["e"])
    e = held("e", min(e_raw, co["e_max"]))
    log_e = math.log(max(e, 1e-6)) - co["e_loc"]
    b_raw = math.exp(co["b_loc"] + co["b_age"] * log_a + co["b_sex"] * s
                     + co["b_scale"] * noise["b"])
    b = held("b", float(np.clip(b_raw, co["b_min"], co["b_max"])))
    log_b = math.log(b) - co["b_loc"]
    v_raw = math.exp(co["v_loc"] + co["v_age"] * log_a + co["v_brain"] * log_b
                     + co["v_scale"] * noise["v"])
    v = held("v", min(v_raw, co["v_max"]))
    log_v = math.log(max(v, 1e-6)) - co["v_loc"]
    l_raw = math.exp(co["l_loc"] + co["l_dur"] * log_d + co["l_edss"] * log_e
                     + co["l_vent"] * log_v + co["l_brain"] * log_b
                     + co["l_scale"] * noise["l"])
    l = held("l", min(l_raw, co["l_max"]))
    return CovariateRecord(a=a, s=s, d=d, e=e, b=b, v=v, l=l, n=n)


def sample_ground_truth_covariates(count: int, config: PhantomConfig, seed: int
                                   ) -> list[tuple[CovariateRecord, dict]]:
    """Sample the designer SCM, storing each record's noise for the oracle."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        noise = {
            "a": rng.standard_normal(), "s": rng.uniform(),
            "d": rng.standard_normal(), "e": rng.standard_normal(),
            "b": rng.standard_normal(), "v": rng.standard_normal(),
            "l": rng.standard_normal(), "n": rng.uniform(0, NUM_SLICES),
        }
        record = covariates_from_noise(noise, config)
        try:
            record.validate()
        except InvalidRecordError:
            continue  # rejection-resample the rare invalid draw
        noise["image_seed"] = int(rng.integers(0, 2 ** 31 - 1))
        out.append((record, noise))
    return out


def config_validity_fraction(config: PhantomConfig, n: int = 20_000,
                             seed: int = 123) -> float:
    """Fraction of designer samples that satisfy record invariants before
    any rejection; the benchmark requires >= 0.999."""
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n):
        noise = {
            "a": rng.standard_normal(), "s": rng.uniform(),
            "d": rng.standard_normal(), "e": rng.standard_normal(),
            "b": rng.standard_normal(), "v": rng.standard_normal(),
            "l": rng.standard_normal(), "n": rng.uniform(0, NUM_SLICES),
        }
        try:
            covariates_from_noise(noise, config).validate()
            ok += 1
        except InvalidRecordError:
            pass
    return ok / n


# ---------------------------------------------------------------------------
# renderer


def _nearest_pixels(dist: np.ndarray, allowed: np.ndarray, count: int) -> np.ndarray:
    """Boolean mask of exactly ``count`` allowed pixels with smallest distance."""
    mask = np.zeros(dist.shape, dtype=bool)
    if count <= 0:
        return mask
    flat_idx = np.flatnonzero(allowed)
    if flat_idx.size == 0:
        return mask
    count = min(count, flat_idx.size)
    order = np.argsort(dist.ravel()[flat_idx], kind="stable")[:count]
    mask.ravel()[flat_idx[order]] = True
    return mask


def render_phantom(covariates: CovariateRecord, exogenous: dict,
                   config: PhantomConfig) -> PhantomRecord:
    """Deterministic renderer: (covariates, stored noise) -> phantom."""
    covariates.validate()
    size = config.image_size
    beta = slice_profile(covariates.n)
    px_per_slice_ml = 1.0 / (NUM_SLICES * config.ml_per_px)

    brain_area = covariates.b * beta * px_per_slice_ml
    vent_area = covariates.v * beta * px_per_slice_ml
    lesion_area = covariates.l * px_per_slice_ml  # flat profile: oracle-invertible

    ry = math.sqrt(brain_area * 1.25 / math.pi)
    rx = brain_area / (math.pi * ry)
    if ry > 0.47 * size:
        raise RenderError(f"brain volume {covariates.b} does not fit the canvas")
    if vent_area + lesion_area > 0.6 * brain_area:
        raise RenderError("ventricle and lesion areas exceed the brain")

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    brain_mask = ellipse <= 1.0
    skull_mask = (ellipse <= 1.25) & (ellipse > 1.1)
    interior = brain_mask & (ellipse <= 0.9)  # structures stay off the edge

    # ventricles: two vertically elongated regions flanking the midline
    vent_metric = np.minimum(
        np.sqrt(((xx - (cx - 0.18 * rx)) ** 2) + ((yy - cy) / 2.4) ** 2),
        np.sqrt(((xx - (cx + 0.18 * rx)) ** 2) + ((yy - cy) / 2.4) ** 2))
    ventricle_mask = _nearest_pixels(vent_metric, interior,
                                     int(round(vent_area)))

    rng = np.random.default_rng(int(exogenous["image_seed"]))
    noise_field = rng.normal(0.0, config.noise_std, size=(size, size))
    blob_intensities = rng.uniform(*config.lesion_intensity_range, size=MAX_BLOBS)
    # fixed angular layout with a small exogenous jitter: lesion placement is
    # a smooth function of the covariates, so the image mechanism can learn it
    angle0 = rng.uniform(-config.angle_jitter, config.angle_jitter)

    n_blobs = int(np.clip(1 + covariates.l // config.blob_volume_ml, 1, MAX_BLOBS))
    # fixed pixel-space template ring: blob placement varies only through the
    # blob count and the small jitter, so the periventricular layout is the
    # same learnable pattern in every record
    ring_r = 0.19 * size
    centers = []
    for k in range(n_blobs):
        theta = angle0 + 2 * math.pi * (k + 0.35) / n_blobs
        centers.append((cx + ring_r * math.cos(theta),
                        cy + ring_r * 1.3 * math.sin(theta)))
    lesion_metric = np.full((size, size), np.inf)
    lesion_owner = np.zeros((size, size), dtype=np.int64)
    for k, (bx, by) in enumerate(centers):
        dist = np.sqrt((xx - bx) ** 2 + (yy - by) ** 2)
        closer = dist < lesion_metric
        lesion_metric = np.where(closer, dist, lesion_metric)
        lesion_owner = np.where(closer, k, lesion_owner)
    lesion_target = int(round(lesion_area))
    if lesion_target < MIN_COMPONENT_PX:
        lesion_target = 0  # below the segmenter's floor: render lesion-free
    lesion_allowed = interior & ~ventricle_mask
    lesion_mask = _nearest_pixels(lesion_metric, lesion_allowed, lesion_target)

    image = np.full((size, size), 0.02, dtype=np.float64)
    image[skull_mask] = 0.45
    image[brain_mask] = 1.0
    image[ventricle_mask] = config.ventricle_intensity
    image[lesion_mask] = blob_intensities[lesion_owner[lesion_mask]]
    image = image + noise_field * brain_mask
    image = np.clip(image, 0.0, None)

    return PhantomRecord(
        covariates=covariates, image=image.astype(np.float32),
        lesion_mask=lesion_mask, ventricle_mask=ventricle_mask,
        brain_mask=brain_mask, exogenous=dict(exogenous))


def generate_phantoms(count: int, config: PhantomConfig, seed: int
                      ) -> list[PhantomRecord]:
    pairs = sample_ground_truth_covariates(count, config, seed)
    return [render_phantom(rec, noise, config) for rec, noise in pairs]


def true_counterfactual(record: PhantomRecord, intervention: Intervention,
                        config: PhantomConfig) -> PhantomRecord:
    """Ground-truth counterfactual: same noise, mutilated designer equations."""
    noise = record.exogenous
    cf_covariates = covariates_from_noise(noise, config,
                                          assignments=intervention.assignments)
    return render_phantom(cf_covariates, noise, config)


def oracle_segment_lesions(image: np.ndarray, brain_mask: np.ndarray,
                           config: PhantomConfig) -> tuple[np.ndarray, float]:
    """Threshold segmenter: bright in-brain components of >= 3 pixels."""
    candidates = (image > LESION_THRESHOLD) & brain_mask
    labels, n_labels = scipy.ndimage.label(candidates)
    if n_labels:
        counts = np.bincount(labels.ravel())
        keep = np.flatnonzero(counts >= MIN_COMPONENT_PX)
        keep = keep[keep != 0]
        mask = np.isin(labels, keep)
    else:
        mask = np.zeros_like(candidates)
    volume = float(mask.sum()) * config.segment_scale
    return mask, volume


# ---------------------------------------------------------------------------
# dataset export / import

MANIFEST_VERSION = 1


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(path)


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8) > 127


def export_dataset(records: list[PhantomRecord], path,
                   clip_percentile: float = 100.0) -> Path:
    """PNG images (8-bit, percentile intensity clip) plus a JSON manifest.

    Phantom lesions occupy well under 0.5% of the pixels, so the clinical
    99.5th-percentile clipping convention would erase them; the default here
    clips at the maximum, which keeps import(export(x)) within quantization.
    """
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        stem = f"{i:06d}"
        clip = float(np.percentile(rec.image, clip_percentile))
        clip = max(clip, 1e-6)
        quantized = np.clip(rec.image / clip, 0.0, 1.0)
        quantized = np.round(quantized * 255).astype(np.uint8)
        Image.fromarray(quantized, mode="L").save(root / "images" / f"{stem}.png")
        _save_mask(root / "masks" / f"{stem}_lesion.png", rec.lesion_mask)
        _save_mask(root / "masks" / f"{stem}_ventricle.png", rec.ventricle_mask)
        _save_mask(root / "masks" / f"{stem}_brain.png", rec.brain_mask)
        entries.append({
            "id": stem,
            "covariates": rec.covariates.to_dict(),
            "exogenous": rec.exogenous,
            "intensity_clip": clip,
            "image": f"images/{stem}.png",
            "lesion_mask": f"masks/{stem}_lesion.png",
            "ventricle_mask": f"masks/{stem}_ventricle.png",
            "brain_mask": f"masks/{stem}_brain.png",
        })
    manifest = {"version": MANIFEST_VERSION, "records": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root / "manifest.json"


def import_dataset(path) -> list[PhantomRecord]:
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise DatasetIOError(f"manifest not found at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetIOError(f"unsupported manifest version "
                             f"{manifest.get('version')!r}")
    records = []
    for entry in manifest["records"]:
        rid = entry.get("id", "<missing id>")
        paths = {key: root / entry[key]
                 for key in ("image", "lesion_mask", "ventricle_mask", "brain_mask")}
        for key, p in paths.items():
            if not p.exists():
                raise DatasetIOError(f"record {rid}: missing {key} file {p}")
        raw = np.asarray(Image.open(paths["image"]), dtype=np.float64) / 255.0
        image = (raw * entry["intensity_clip"]).astype(np.float32)
        records.append(PhantomRecord(
            covariates=CovariateRecord.from_dict(entry["covariates"]),
            image=image,
            lesion_mask=_load_mask(paths["lesion_mask"]),
            ventricle_mask=_load_mask(paths["ventricle_mask"]),
            brain_mask=_load_mask(paths["brain_mask"]),
            exogenous=dict(entry["exogenous"])))
    return records
