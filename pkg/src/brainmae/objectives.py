"""Pretraining objectives: masked reconstruction, EMA teacher, cross-modal
distillation, and their composition.

Reconstruction is mean squared error against per-patch-normalized targets,
computed only on masked patches and averaged per modality then across the
observed modalities. Distillation predicts the teacher's PET pool from the
student's MRI pool and vice versa with a cosine objective; it activates
only on samples where both token groups are present ("paired").
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DataError, PairingError, UndefinedLossError
from .modalities import MRI_MODALITIES, PET
from .model import modality_slice

PATCH_NORM_EPS = 1e-6


def per_patch_normalize(patch: torch.Tensor) -> torch.Tensor:
    """Normalize along the last (voxel) axis with population variance."""
    mean = patch.mean(dim=-1, keepdim=True)
    var = patch.var(dim=-1, unbiased=False, keepdim=True)
    return (patch - mean) / torch.sqrt(var + PATCH_NORM_EPS)


@dataclass
class ReconstructionBatch:
    """One sample's predictions, raw targets and masked index sets."""

    predictions: dict[str, torch.Tensor]  # modality -> (N, p^3)
    targets: dict[str, torch.Tensor]  # modality -> (N, p^3), unnormalized
    masked: dict[str, np.ndarray]  # modality -> masked patch indices


def mae_loss(batch: ReconstructionBatch, observed: Sequence[str]) -> torch.Tensor:
    """Masked-patch reconstruction loss per Eq.-style composition.

    Per observed modality: mean over masked patches of the squared L2
    distance between the prediction and the per-patch-normalized target.
    Modalities with an empty masked set drop out of the outer average;
    if every observed modality is fully visible the loss is undefined.
    """
    terms = []
    for m in observed:
        idx = np.asarray(batch.masked[m], dtype=np.int64)
        if len(idx) == 0:
            continue
        pred = batch.predictions[m][idx]
        target = per_patch_normalize(batch.targets[m][idx])
        terms.append(((pred - target) ** 2).sum(dim=-1).mean())
    if not terms:
        raise UndefinedLossError("no masked patches in any observed modality")
    return torch.stack(terms).mean()


def momentum_at(step: int, total_steps: int, mu0: float = 0.996) -> float:
    """Teacher momentum: cosine from mu0 at step 0 to 1.0 at the last step."""
    if not 0 <= step <= total_steps:
        raise DataError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - mu0) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, mu: float) -> None:
    """teacher <- mu * teacher + (1 - mu) * student, elementwise, no grad."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise DataError("teacher/student parameter sets differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise DataError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.mul_(mu).add_(s.detach(), alpha=1.0 - mu)


def group_pool(
    tokens: torch.Tensor, key_mask: torch.Tensor, n_patches: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Average encoder outputs within the MRI and PET token groups.

    ``tokens`` is (S, dim) for one sample; only attention-included
    positions are pooled. Raises PairingError when either group is empty,
    so callers must gate on the pairing flag.
    """
    mri_sel = torch.zeros(tokens.shape[0], dtype=torch.bool)
    for m in MRI_MODALITIES:
        sl = modality_slice(m, n_patches)
        mri_sel[sl] = key_mask[sl]
    pet_sel = torch.zeros_like(mri_sel)
    sl = modality_slice(PET, n_patches)
    pet_sel[sl] = key_mask[sl]
    if not bool(mri_sel.any()) or not bool(pet_sel.any()):
        raise PairingError("sample has no included MRI or PET tokens to pool")
    return tokens[mri_sel].mean(dim=0), tokens[pet_sel].mean(dim=0)


class RCMDHeads(nn.Module):
    """Two symmetric MLP predictors (dim -> 2*dim -> dim), student-side."""

    def __init__(self, dim: int):
        super().__init__()
        self.mri_to_pet = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )
        self.pet_to_mri = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )


def _l2_normalize(v: torch.Tensor, what: str) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DataError(f"cannot l2-normalize zero-norm {what} vector")
    return v / norm


def rcmd_loss(
    z_mri_s: torch.Tensor,
    z_pet_s: torch.Tensor,
    z_mri_t: torch.Tensor,
    z_pet_t: torch.Tensor,
    heads: RCMDHeads,
) -> torch.Tensor:
    """1 - mean cosine agreement between cross-modal predictions and the
    (gradient-detached) teacher pools; all representations l2-normalized.
    Range [0, 2]."""
    pred_pet = _l2_normalize(heads.mri_to_pet(_l2_normalize(z_mri_s, "student MRI")), "prediction")
    pred_mri = _l2_normalize(heads.pet_to_mri(_l2_normalize(z_pet_s, "student PET")), "prediction")
    target_pet = _l2_normalize(z_pet_t.detach(), "teacher PET")
    target_mri = _l2_normalize(z_mri_t.detach(), "teacher MRI")
    cos = (pred_pet * target_pet).sum(-1) + (pred_mri * target_mri).sum(-1)
    return 1.0 - 0.5 * cos


def total_loss(
    l_mae: torch.Tensor,
    l_rcmd: Optional[torch.Tensor],
    paired: bool,
    lam: float,
) -> torch.Tensor:
    """Total objective: reconstruction plus gated, weighted distillation."""
    if lam < 0.0:
        raise DataError(f"lambda must be >= 0, got {lam}")
    if not paired or l_rcmd is None:
        return l_mae
    return l_mae + lam * l_rcmd
