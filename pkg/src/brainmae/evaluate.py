"""Evaluation protocols: within-subject modality-robustness sweeps,
label-efficiency sweeps, test-split evaluation and attention-map export."""

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .cohort import CohortManifest, SubjectRecord
from .errors import ProtocolError
from .finetune import (
    FinetuneConfig,
    FinetunedModel,
    evaluate_records,
    finetune,
    task_label,
)
from .masking import AtlasMembership, MaskPlan
from .metrics import MetricsReport
from .modalities import DESIGNATED_COMBINATIONS, MODALITIES, canonical, combination_tag
from .rng import substream
from .volumes import PatchGrid, write_volume

LABEL_FRACTIONS = (0.1, 0.2, 0.5, 0.8, 1.0)


def evaluate_split(
    bundle: FinetunedModel, manifest: CohortManifest, split: str = "test", seed: int = 0
) -> MetricsReport:
    """Metrics per observed modality combination present in a split."""
    records = [manifest.load_subject(e) for e in manifest.split(split)]
    if not records:
        raise ProtocolError(f"split {split!r} is empty")
    report = MetricsReport(metadata={"split": split})
    by_combo: dict[str, list[SubjectRecord]] = {}
    for r in records:
        by_combo.setdefault(combination_tag(r.observed), []).append(r)
    for combo in sorted(by_combo):
        try:
            metrics, n = evaluate_records(bundle, by_combo[combo])
        except Exception:
            continue
        report.add(bundle.task, combo, seed, n, metrics)
    return report


def robustness_sweep(
    bundle: FinetunedModel, subjects: Sequence[SubjectRecord], seed: int = 0
) -> MetricsReport:
    """Evaluate the same fully observed subjects under each designated
    combination, zeroing and attention-blocking the dropped modalities."""
    incomplete = [s.subject_id for s in subjects if set(s.observed) != set(MODALITIES)]
    if incomplete or not subjects:
        raise ProtocolError(
            "robustness sweep needs fully observed subjects; "
            f"missing modalities on {incomplete[:5]}"
        )
    report = MetricsReport(
        metadata={
            "protocol": "within_subject_modality_dropout",
            "combinations": [combination_tag(c) for c in DESIGNATED_COMBINATIONS],
            "nested": True,
        }
    )
    for combo in DESIGNATED_COMBINATIONS:
        metrics, n = evaluate_records(bundle, list(subjects), observed_override=combo)
        report.add(bundle.task, combination_tag(combo), seed, n, metrics)
    return report


def nested_label_subsets(
    entries, task: str, fractions: Sequence[float], seed: int
) -> dict[float, list]:
    """Diagnosis-stratified nested subsamples of labeled train entries.

    The selection at a smaller fraction is a subset of every larger one;
    fraction 1.0 returns the full labeled list in manifest order.
    """
    labeled = [e for e in entries if task_label(e, task) is not None]
    by_class: dict[str, list] = {}
    for e in labeled:
        by_class.setdefault(e.diagnosis or "none", []).append(e)

    orders = {
        cls: substream(seed, "labelfrac", cls).permutation(len(members))
        for cls, members in by_class.items()
    }
    out = {}
    for frac in fractions:
        chosen = set()
        for cls, members in by_class.items():
            take = len(members) if frac >= 1.0 else max(1, round(frac * len(members)))
            if take < 2 and len(members) >= 2:
                raise ProtocolError(
                    f"fraction {frac} yields {take} subject(s) of class {cls}"
                )
            chosen.update(members[i].subject_id for i in orders[cls][:take])
        out[frac] = [e for e in labeled if e.subject_id in chosen]
    return out


def label_efficiency_sweep(
    checkpoint: Optional[str],
    manifest: CohortManifest,
    task: str,
    cfg: FinetuneConfig,
    fractions: Sequence[float] = LABEL_FRACTIONS,
    model_cfg=None,
) -> MetricsReport:
    """Finetune per training fraction on nested subsamples; val metrics per
    fraction against the same validation split throughout."""
    subsets = nested_label_subsets(manifest.split("train"), task, fractions, cfg.seed)
    report = MetricsReport(
        metadata={"protocol": "label_efficiency", "fractions": list(fractions)}
    )
    init = "pretrained" if checkpoint is not None else "scratch"
    for frac in fractions:
        bundle, _ = finetune(
            checkpoint, manifest, task, cfg, model_cfg=model_cfg,
            train_entries=subsets[frac],
        )
        val_records = [manifest.load_subject(e) for e in manifest.split("val")]
        metrics, n = evaluate_records(bundle, val_records)
        report.add(task, "val", cfg.seed, n, metrics, fraction=frac, init=init)
    return report


def patch_attention(
    encoder, record: SubjectRecord, observed_override=None
) -> np.ndarray:
    """Per-spatial-patch CLS attention mass, length N, summing to 1.

    Final-layer CLS row averaged over heads, renormalized over included
    patch tokens (CLS self-attention excluded), then accumulated across
    modalities onto the shared spatial grid.
    """
    from .finetune import _collate_full_visibility

    n = encoder.cfg.n_patches
    volumes, plans = _collate_full_visibility([record], encoder.cfg, observed_override)
    encoder.eval()
    with torch.no_grad():
        enc_out, batch = encoder(volumes, plans)
    row = enc_out.cls_attention[-1].mean(dim=1)[0]  # (S,)
    included = batch.key_mask[0].clone()
    included[0] = False  # drop CLS self-attention
    weights = (row * included).numpy().astype(np.float64)
    total = weights.sum()
    if total <= 0:
        raise ProtocolError("no included patch tokens to build an attention map")
    weights /= total
    spatial = np.zeros(n, dtype=np.float64)
    for i, m in enumerate(MODALITIES):
        spatial += weights[1 + i * n : 1 + (i + 1) * n]
    return spatial


def attention_heatmap(spatial: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Unfold per-patch attention to voxel space by nearest-patch upsampling."""
    bz, by, bx = grid.blocks
    p = grid.patch
    coarse = np.asarray(spatial, dtype=np.float64).reshape(bz, by, bx)
    return np.repeat(np.repeat(np.repeat(coarse, p, 0), p, 1), p, 2)


def region_attention_table(
    spatial: np.ndarray, membership: AtlasMembership, region_classes: Sequence[str]
) -> list[dict]:
    """Per-region attention mass next to the region's patch-volume share."""
    r = membership.matrix
    mass = (r * spatial[:, None]).sum(axis=0)
    volume = r.sum(axis=0)
    volume_frac = volume / volume.sum()
    return [
        {
            "region": k + 1,
            "region_class": region_classes[k],
            "attention_mass": float(mass[k]),
            "volume_fraction": float(volume_frac[k]),
        }
        for k in range(membership.n_regions)
    ]


def export_attention_map(
    bundle: FinetunedModel,
    record: SubjectRecord,
    membership: AtlasMembership,
    region_classes: Sequence[str],
    out_prefix,
) -> tuple[np.ndarray, list[dict]]:
    """Write ``<prefix>.bav`` (voxel heatmap) and ``<prefix>_regions.csv``."""
    grid = bundle.model_config.grid
    spatial = patch_attention(bundle.encoder, record)
    heatmap = attention_heatmap(spatial, grid)
    table = region_attention_table(spatial, membership, region_classes)

    out_prefix = Path(out_prefix)
    write_volume(out_prefix.with_suffix(".bav"), heatmap.astype(np.float32))
    with open(out_prefix.parent / (out_prefix.name + "_regions.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["region", "region_class", "attention_mass", "volume_fraction"]
        )
        writer.writeheader()
        writer.writerows(table)
    return heatmap, table
