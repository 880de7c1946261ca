"""Synthetic cohort and atlas generation.

Produces desk-scale cohorts with the same interfaces as real data: BAV1
volumes, a BAL1 region atlas, and a JSON manifest. Each subject carries a
latent disease score z in [0, 1]; structural modalities (T1/T2/FLAIR) dim
with z inside AD-critical regions while PET brightens there, both scaled
by ``signal_strength``. Labels derive from z (diagnosis thresholds, MMSE)
and from a global-intensity covariate (age), so simple region-mean
statistics are predictive by construction — generator adequacy is pinned
by an oracle-classifier test, not by the neural model.

Generation is a pure function of the config: every random draw comes from
a substream keyed by (seed, purpose, subject), so parallel order and
regeneration never change the output bytes.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .cohort import CohortManifest, SubjectEntry
from .errors import ConfigError
from .modalities import DESIGNATED_COMBINATIONS, MODALITIES, T1, canonical, combination_tag
from .rng import substream
from .volumes import write_atlas, write_volume

REGION_CLASSES = ("ad_critical", "gray_matter", "non_brain")

# Split ratios: designated combinations feed the test protocol.
_DESIGNATED_TAGS = {combination_tag(c) for c in DESIGNATED_COMBINATIONS}


@dataclass
class SyntheticCohortConfig:
    """Knobs of the synthetic generator.

    Label functions are fixed, documented constants: diagnosis thresholds
    z < 1/3 -> CN, z < 2/3 -> MCI, else AD; MMSE = 30 - mmse_slope * z plus
    Gaussian noise (sigma ``mmse_noise``), clipped to [0, 30]; age is drawn
    uniformly and linked to a global intensity dimming factor. Their exact
    values are artifact choices validated through the oracle-classifier
    adequacy check.
    """

    n_subjects: int = 200
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    n_regions: int = 9
    seed: int = 0
    signal_strength: float = 1.0
    # Per-modality observation probability; T1 is always observed.
    observe_prob: dict = field(
        default_factory=lambda: {"T2": 0.6, "FLAIR": 0.8, "PET": 0.5}
    )
    # Disease effect per unit z inside AD-critical regions.
    disease_coeff: dict = field(
        default_factory=lambda: {"T1": -0.30, "T2": -0.20, "FLAIR": -0.20, "PET": 0.40}
    )
    diagnosis_thresholds: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)
    mmse_slope: float = 12.0
    mmse_noise: float = 1.0
    age_range: tuple[float, float] = (55.0, 90.0)
    age_dim_strength: float = 0.15
    subject_field_sigma: float = 0.06
    modality_field_sigma: float = 0.03
    voxel_noise: float = 0.02
    base_intensity_range: tuple[float, float] = (0.30, 0.70)

    def validate(self) -> None:
        if self.n_subjects <= 0:
            raise ConfigError("n_subjects must be positive")
        if self.n_regions < 3:
            raise ConfigError("n_regions must be >= 3 (one region per weight class)")
        if not 0.0 <= self.signal_strength:
            raise ConfigError("signal_strength must be >= 0")
        for m, p in self.observe_prob.items():
            if m not in MODALITIES or m == T1:
                raise ConfigError(f"observe_prob key {m!r} invalid")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"observe_prob[{m}]={p} outside [0, 1]")
        lo, hi = self.diagnosis_thresholds
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("diagnosis thresholds must satisfy 0 < lo < hi < 1")


def generate_atlas(cfg: SyntheticCohortConfig) -> tuple[np.ndarray, list[str]]:
    """Build a nearest-centroid parcellation inside an ellipsoidal mask.

    Returns (labels, region_classes) where labels is uint16 with region 0 =
    background and region_classes[k-1] classifies region k. Regions nearest
    the volume center become AD-critical, the outermost become non-brain.
    """
    rng = substream(cfg.seed, "atlas")
    shape = np.array(cfg.volume_shape)
    center = (shape - 1) / 2.0
    semi = 0.42 * shape

    zz, yy, xx = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    coords = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
    radial = (((coords - center) / semi) ** 2).sum(axis=-1)
    mask = radial <= 1.0

    inside = np.argwhere(mask)
    picks = rng.choice(len(inside), size=cfg.n_regions, replace=False)
    centroids = inside[picks].astype(np.float64)

    d2 = ((inside[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=1)

    labels = np.zeros(cfg.volume_shape, dtype=np.uint16)
    labels[tuple(inside.T)] = nearest.astype(np.uint16) + 1

    centrality = (((centroids - center) / semi) ** 2).sum(axis=-1)
    order = np.argsort(centrality, kind="stable")
    k = cfg.n_regions
    n_crit = max(1, round(0.25 * k))
    n_nonbrain = max(1, round(0.20 * k))
    n_crit = min(n_crit, k - n_nonbrain - 1) or 1
    classes = ["gray_matter"] * k
    for i in order[:n_crit]:
        classes[i] = "ad_critical"
    for i in order[k - n_nonbrain :]:
        classes[i] = "non_brain"
    return labels, classes


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    coarse = rng.normal(0.0, sigma, size=(4, 4, 4))
    factors = tuple(s / 4.0 for s in shape)
    return ndimage.zoom(coarse, factors, order=1, mode="nearest")


@dataclass
class _SubjectDraw:
    z: float
    age: float
    diagnosis: str
    mmse: float
    observed: tuple[str, ...]


def _draw_subject(cfg: SyntheticCohortConfig, rng: np.random.Generator) -> _SubjectDraw:
    z = float(rng.uniform(0.0, 1.0))
    age = float(rng.uniform(*cfg.age_range))
    lo, hi = cfg.diagnosis_thresholds
    diagnosis = "CN" if z < lo else ("MCI" if z < hi else "AD")
    mmse = float(np.clip(30.0 - cfg.mmse_slope * z + rng.normal(0.0, cfg.mmse_noise), 0.0, 30.0))
    observed = [T1]
    for m in MODALITIES[1:]:
        if rng.random() < cfg.observe_prob.get(m, 0.0):
            observed.append(m)
    return _SubjectDraw(z, age, diagnosis, mmse, canonical(observed))


def _render_volumes(
    cfg: SyntheticCohortConfig,
    draw: _SubjectDraw,
    atlas: np.ndarray,
    classes: list[str],
    base: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    mask = atlas > 0
    critical = np.isin(atlas, [k + 1 for k, c in enumerate(classes) if c == "ad_critical"])

    lo_age, hi_age = cfg.age_range
    age_frac = (draw.age - lo_age) / (hi_age - lo_age)
    dim = 1.0 - cfg.age_dim_strength * age_frac + rng.normal(0.0, 0.02)

    shared = _smooth_field(rng, cfg.volume_shape, cfg.subject_field_sigma)
    volumes = {}
    for m in draw.observed:
        vol = np.full(cfg.volume_shape, 0.05, dtype=np.float64)
        vol[mask] = base[m][atlas[mask]]
        vol += shared
        vol += _smooth_field(rng, cfg.volume_shape, cfg.modality_field_sigma)
        effect = cfg.disease_coeff[m] * cfg.signal_strength * draw.z
        vol[critical] += effect
        vol[mask] *= dim
        vol += rng.normal(0.0, cfg.voxel_noise, size=cfg.volume_shape)
        volumes[m] = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return volumes


def _assign_splits(entries: list[dict], seed: int) -> None:
    strata: dict[tuple, list[dict]] = {}
    for e in entries:
        strata.setdefault((e["combination"], e["diagnosis"]), []).append(e)
    for (combo, dx), members in sorted(strata.items()):
        rng = substream(seed, "split", combo, dx)
        order = rng.permutation(len(members))
        n = len(members)
        if combo in _DESIGNATED_TAGS:
            n_test = round(0.30 * n)
            n_val = round(0.10 * n)
            splits = ["test"] * n_test + ["val"] * n_val + ["train"] * (n - n_test - n_val)
        else:
            n_val = round(0.20 * n)
            splits = ["val"] * n_val + ["train"] * (n - n_val)
        for pos, idx in enumerate(order):
            members[idx]["split"] = splits[pos]


def generate_synthetic_cohort(
    cfg: SyntheticCohortConfig, out_dir
) -> tuple[CohortManifest, np.ndarray]:
    """Generate a cohort under ``out_dir`` and return (manifest, atlas).

    Writes ``atlas.bal``, one BAV1 file per subject-modality under
    ``volumes/``, and ``manifest.json``. Deterministic per config.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    atlas, classes = generate_atlas(cfg)
    write_atlas(out_dir / "atlas.bal", atlas)

    # Cohort-level region base intensities per modality; index 0 unused
    # (background rendered separately), kept so atlas labels index directly.
    base_rng = substream(cfg.seed, "bases")
    lo, hi = cfg.base_intensity_range
    base = {
        m: np.concatenate([[0.05], base_rng.uniform(lo, hi, size=cfg.n_regions)])
        for m in MODALITIES
    }

    rows = []
    for idx in range(cfg.n_subjects):
        sid = f"sub{idx:04d}"
        rng = substream(cfg.seed, "subject", idx)
        draw = _draw_subject(cfg, rng)
        volumes = _render_volumes(cfg, draw, atlas, classes, base, rng)
        files = {}
        for m in draw.observed:
            rel = f"volumes/{sid}_{m}.bav"
            write_volume(out_dir / rel, volumes[m])
            files[m] = rel
        rows.append(
            {
                "id": sid,
                "observed": draw.observed,
                "combination": combination_tag(draw.observed),
                "files": files,
                "diagnosis": draw.diagnosis,
                "mmse": draw.mmse,
                "age": draw.age,
                "split": "train",
            }
        )

    _assign_splits(rows, cfg.seed)

    entries = [
        SubjectEntry(
            subject_id=r["id"],
            split=r["split"],
            observed=r["observed"],
            files=r["files"],
            diagnosis=r["diagnosis"],
            mmse=r["mmse"],
            age=r["age"],
        )
        for r in rows
    ]
    manifest = CohortManifest(
        subjects=entries,
        volume_shape=cfg.volume_shape,
        atlas_file="atlas.bal",
        region_classes=classes,
        root=out_dir,
        generator_config=_config_echo(cfg),
    )
    manifest.save(out_dir / "manifest.json")
    return manifest, atlas


def _config_echo(cfg: SyntheticCohortConfig) -> dict:
    return {
        "n_subjects": cfg.n_subjects,
        "volume_shape": list(cfg.volume_shape),
        "n_regions": cfg.n_regions,
        "seed": cfg.seed,
        "signal_strength": cfg.signal_strength,
        "observe_prob": dict(cfg.observe_prob),
        "disease_coeff": dict(cfg.disease_coeff),
        "diagnosis_thresholds": list(cfg.diagnosis_thresholds),
        "mmse_slope": cfg.mmse_slope,
        "mmse_noise": cfg.mmse_noise,
        "age_range": list(cfg.age_range),
        "age_dim_strength": cfg.age_dim_strength,
        "subject_field_sigma": cfg.subject_field_sigma,
        "modality_field_sigma": cfg.modality_field_sigma,
        "voxel_noise": cfg.voxel_noise,
        "base_intensity_range": list(cfg.base_intensity_range),
    }


def config_from_dict(data: dict) -> SyntheticCohortConfig:
    """Strict constructor: unknown keys are configuration errors."""
    known = set(SyntheticCohortConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown synthetic-cohort config keys: {sorted(unknown)}")
    data = dict(data)
    for key in ("volume_shape", "diagnosis_thresholds", "age_range", "base_intensity_range"):
        if key in data:
            data[key] = tuple(data[key])
    cfg = SyntheticCohortConfig(**data)
    cfg.validate()
    return cfg
