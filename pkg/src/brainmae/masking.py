"""Visible-token budgeting and pathology-aware curriculum masking.

This module decides which patch tokens each modality keeps visible:

* a constant visible budget B = round((1 - r) * N * M_total) is split
  across the observed modalities with a Dirichlet draw, so the encoder
  sequence length never depends on availability;
* per-patch importance combines a static anatomical prior (region weights
  through the patch-region membership matrix) with a dynamic score
  aggregated from teacher CLS attention;
* a three-phase temperature curriculum converts importance into mask
  probabilities, and Gumbel-top-k draws the masked subset, biasing masking
  toward high-importance patches as the temperature anneals.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .modalities import MODALITIES, canonical
from .volumes import PatchGrid

SCORE_EPS = 1e-8


class _UniformPhase:
    """Sentinel returned by temperature_at during the uniform-masking phase."""

    def __repr__(self):
        return "UNIFORM"


UNIFORM = _UniformPhase()

# Pathological-relevance weight per region class.
REGION_CLASS_WEIGHTS = {"ad_critical": 3.0, "gray_matter": 1.5, "non_brain": 0.3}


@dataclass(frozen=True)
class MaskingConfig:
    """Global mask ratio and Dirichlet redistribution parameters."""

    mask_ratio: float = 0.75
    alpha: float = 1.0
    m_total: int = len(MODALITIES)
    budget_mode: str = "constant"  # or "scaled": budget grows with |observed|

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.budget_mode not in ("constant", "scaled"):
            raise ConfigError(f"unknown budget_mode {self.budget_mode!r}")

    def visible_budget(self, n_patches: int, n_observed: int) -> int:
        scale = self.m_total if self.budget_mode == "constant" else n_observed
        budget = round((1.0 - self.mask_ratio) * n_patches * scale)
        if budget <= 0:
            raise ConfigError("visible budget is zero; lower the mask ratio")
        return budget


@dataclass(frozen=True)
class CurriculumConfig:
    """Three-phase temperature schedule and score-mixing parameters."""

    tau_start: float = 5.0
    tau_target: float = 1.0
    phase1_end: float = 0.2
    phase2_end: float = 0.7
    beta: float = 0.5
    dynamic_refresh_frac: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.phase1_end < self.phase2_end <= 1.0:
            raise ConfigError("phase boundaries must satisfy 0 < p1 < p2 <= 1")
        if not self.tau_start > self.tau_target > 0.0:
            raise ConfigError("temperatures must satisfy tau_start > tau_target > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")


@dataclass
class AtlasMembership:
    """Patch-region membership: matrix[i, k-1] = voxel fraction of patch i in region k."""

    matrix: np.ndarray  # (N, K) float64, rows sum to <= 1 (background excluded)

    @property
    def n_patches(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_regions(self) -> int:
        return self.matrix.shape[1]


def build_membership_matrix(atlas: np.ndarray, grid: PatchGrid) -> AtlasMembership:
    """Count voxel labels per patch and normalize by patch volume."""
    if tuple(atlas.shape) != tuple(grid.shape):
        raise ConfigError(f"atlas shape {atlas.shape} != grid shape {grid.shape}")
    n_regions = int(atlas.max())
    p = grid.patch
    bz, by, bx = grid.blocks
    blocks = atlas.reshape(bz, p, by, p, bx, p).transpose(0, 2, 4, 1, 3, 5)
    flat = blocks.reshape(grid.n_patches, grid.patch_voxels)
    matrix = np.zeros((grid.n_patches, n_regions), dtype=np.float64)
    for i in range(grid.n_patches):
        counts = np.bincount(flat[i].astype(np.int64), minlength=n_regions + 1)
        matrix[i] = counts[1:] / grid.patch_voxels
    return AtlasMembership(matrix)


def region_weights(region_classes: Sequence[str]) -> np.ndarray:
    """Map region classes to pathological-relevance weights."""
    try:
        return np.array([REGION_CLASS_WEIGHTS[c] for c in region_classes], dtype=np.float64)
    except KeyError as e:
        raise ConfigError(f"unknown region class {e.args[0]!r}") from e


def static_scores(membership: AtlasMembership, weights: np.ndarray) -> np.ndarray:
    """Static importance: membership-weighted sum of region weights."""
    if membership.n_regions != len(weights):
        raise ConfigError(
            f"membership has {membership.n_regions} regions, weights {len(weights)}"
        )
    return membership.matrix @ weights


def dynamic_scores_from_attention(
    cls_attention: np.ndarray, membership: AtlasMembership
) -> np.ndarray:
    """Aggregate CLS-to-patch attention to region level and back to patches.

    Region score a_k = sum_i R[i,k] * attn[i] / (sum_i R[i,k] + eps); patch
    score s_i = sum_k R[i,k] * a_k.
    """
    attn = np.asarray(cls_attention, dtype=np.float64)
    if attn.shape != (membership.n_patches,):
        raise DataError(
            f"attention length {attn.shape} != patch count {membership.n_patches}"
        )
    if np.any(attn < 0.0):
        raise DataError("attention weights must be nonnegative")
    r = membership.matrix
    region = (r * attn[:, None]).sum(axis=0) / (r.sum(axis=0) + SCORE_EPS)
    return r @ region


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo = x.min()
    return (x - lo) / (x.max() - lo + SCORE_EPS)


def combine_scores(s_static: np.ndarray, s_dynamic: np.ndarray, beta: float) -> np.ndarray:
    """Blend min-max-normalized static and dynamic scores with weight beta."""
    if np.shape(s_static) != np.shape(s_dynamic):
        raise ConfigError("score vectors must have identical length")
    return (1.0 - beta) * minmax_normalize(s_static) + beta * minmax_normalize(s_dynamic)


def temperature_at(step: int, total_steps: int, cfg: CurriculumConfig):
    """Curriculum temperature, or the UNIFORM sentinel during phase 1.

    Phase 2 anneals tau_start -> tau_target with cosine decay; phase 3
    holds tau_target. Continuous at the phase-2/3 boundary.
    """
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    t1 = cfg.phase1_end * total_steps
    t2 = cfg.phase2_end * total_steps
    if step < t1:
        return UNIFORM
    if step < t2:
        u = (step - t1) / (t2 - t1)
        return cfg.tau_target + (cfg.tau_start - cfg.tau_target) * (1.0 + math.cos(math.pi * u)) / 2.0
    return cfg.tau_target


def mask_probabilities(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over importance scores, max-subtracted for stability."""
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    s = np.asarray(scores, dtype=np.float64) / tau
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def gumbel_top_k_mask(p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample a size-k index subset with probability keys log p_i + Gumbel noise.

    Equivalent to sequential sampling without replacement with weights p;
    high-probability (high-importance) patches land in the masked set.
    Returns sorted indices.
    """
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    if not 0 <= k <= n:
        raise ConfigError(f"k={k} outside [0, {n}]")
    if np.any(p <= 0.0):
        raise DataError("probabilities must be strictly positive")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    gumbel = -np.log(-np.log(rng.uniform(size=n)))
    keys = np.log(p) + gumbel
    top = np.argpartition(-keys, k - 1)[:k]
    return np.sort(top)


def _apportion(proportions: np.ndarray, budget: int, cap: int) -> np.ndarray:
    """Largest-remainder apportionment of ``budget`` with per-slot cap.

    Counts sum to min(budget, cap * len(proportions)) exactly; overflow
    above the cap is redistributed greedily to uncapped slots in
    descending-proportion order.
    """
    quotas = proportions * budget
    counts = np.floor(quotas).astype(np.int64)
    remainder = budget - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:remainder]] += 1
    counts = np.minimum(counts, cap)
    deficit = min(budget, cap * len(proportions)) - int(counts.sum())
    for i in np.argsort(-proportions, kind="stable"):
        if deficit <= 0:
            break
        add = min(cap - int(counts[i]), deficit)
        counts[i] += add
        deficit -= add
    return counts


def allocate_visible_budget(
    observed: Sequence[str],
    n_patches: int,
    cfg: MaskingConfig,
    rng: np.random.Generator,
) -> dict[str, int]:
    """Split the visible budget across observed modalities via Dirichlet(alpha).

    Per-modality counts are capped at N; the total always equals
    min(B, N * |observed|).
    """
    obs = canonical(observed)
    if not obs:
        raise DataError("observed modality set is empty")
    budget = cfg.visible_budget(n_patches, len(obs))
    proportions = rng.dirichlet(np.full(len(obs), cfg.alpha))
    counts = _apportion(proportions, budget, n_patches)
    return {m: int(c) for m, c in zip(obs, counts)}


@dataclass
class MaskPlan:
    """Per-modality visible/masked patch-index partition.

    Missing modalities are fully masked. For every modality key,
    visible and masked are disjoint sorted index arrays covering 0..N-1.
    """

    n_patches: int
    visible: dict[str, np.ndarray]
    masked: dict[str, np.ndarray]

    @classmethod
    def from_visible(cls, n_patches: int, visible: dict[str, np.ndarray]) -> "MaskPlan":
        full = np.arange(n_patches)
        vis, mask = {}, {}
        for m in MODALITIES:
            v = np.sort(np.asarray(visible.get(m, []), dtype=np.int64))
            vis[m] = v
            mask[m] = np.setdiff1d(full, v, assume_unique=True)
        return cls(n_patches, vis, mask)

    @classmethod
    def full_visibility(cls, observed: Sequence[str], n_patches: int) -> "MaskPlan":
        obs = canonical(observed)
        return cls.from_visible(n_patches, {m: np.arange(n_patches) for m in obs})

    def visible_count(self) -> int:
        return sum(len(v) for v in self.visible.values())

    def validate(self) -> None:
        for m in MODALITIES:
            v, s = self.visible[m], self.masked[m]
            if len(np.intersect1d(v, s)) or len(np.union1d(v, s)) != self.n_patches:
                raise DataError(f"mask plan for {m} is not a partition of 0..N-1")
            if len(v) and (v.min() < 0 or v.max() >= self.n_patches):
                raise DataError(f"mask plan for {m} has out-of-range indices")


@dataclass
class ImportanceState:
    """Importance vectors and the mask-probability cache for the current step."""

    s_static: np.ndarray
    s_dynamic: np.ndarray
    s_combined: np.ndarray
    beta: float
    p_mask: Optional[np.ndarray] = field(default=None)

    @classmethod
    def from_static(cls, s_static: np.ndarray, beta: float) -> "ImportanceState":
        s_static = np.asarray(s_static, dtype=np.float64)
        s_dynamic = np.zeros_like(s_static)
        return cls(
            s_static=s_static,
            s_dynamic=s_dynamic,
            s_combined=combine_scores(s_static, s_dynamic, beta),
            beta=beta,
        )

    def update_dynamic(self, s_dynamic: np.ndarray) -> None:
        self.s_dynamic = np.asarray(s_dynamic, dtype=np.float64)
        self.s_combined = combine_scores(self.s_static, self.s_dynamic, self.beta)


def build_mask_plan(
    observed: Sequence[str],
    n_patches: int,
    masking_cfg: MaskingConfig,
    importance: ImportanceState,
    step: int,
    total_steps: int,
    curriculum: CurriculumConfig,
    rng: np.random.Generator,
    force_uniform: bool = False,
) -> MaskPlan:
    """Allocate visible budgets and draw per-modality masked index sets.

    Phase 1 (and ``force_uniform``, the curriculum-ablation switch) uses
    exact uniform sampling without replacement; later phases draw
    Gumbel-top-k under the temperature-softmax probabilities.
    """
    obs = canonical(observed)
    budgets = allocate_visible_budget(obs, n_patches, masking_cfg, rng)
    tau = UNIFORM if force_uniform else temperature_at(step, total_steps, curriculum)
    if tau is not UNIFORM:
        importance.p_mask = mask_probabilities(importance.s_combined, tau)

    visible = {}
    for m in obs:
        k_masked = n_patches - budgets[m]
        if tau is UNIFORM:
            masked = rng.choice(n_patches, size=k_masked, replace=False)
        else:
            masked = gumbel_top_k_mask(importance.p_mask, k_masked, rng)
        visible[m] = np.setdiff1d(np.arange(n_patches), masked, assume_unique=False)
    return MaskPlan.from_visible(n_patches, visible)
