"""Pretraining driver: schedules, the optimization loop, dynamic-score
refresh, checkpointing and reproducible resume.

All stochastic choices (modality-subset draws, spatial transforms, mask
plans, data order) come from substreams keyed by (seed, purpose, step,
slot), never from shared mutable RNG state, so a resumed run replays the
exact step sequence of an uninterrupted one.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentConfig, augment
from .checkpoint import (
    load_checkpoint,
    load_module_tensors,
    load_optimizer_tensors,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from .cohort import CohortManifest, SubjectRecord
from .errors import ConfigError, TrainingDivergedError, UndefinedLossError
from .masking import (
    UNIFORM,
    CurriculumConfig,
    ImportanceState,
    MaskingConfig,
    MaskPlan,
    build_mask_plan,
    build_membership_matrix,
    dynamic_scores_from_attention,
    region_weights,
    static_scores,
    temperature_at,
)
from .model import (
    MaskedAutoencoder,
    ModelConfig,
    make_teacher,
    modality_slice,
    seed_torch,
)
from .modalities import MODALITIES, PET, T1, canonical, sample_modality_subset
from .objectives import (
    RCMDHeads,
    ReconstructionBatch,
    ema_update,
    group_pool,
    mae_loss,
    momentum_at,
    rcmd_loss,
)
from .rng import substream
from .volumes import partition_patches

LOG_COLUMNS = ("step", "epoch", "l_mae", "l_rcmd", "lambda", "mu", "tau", "lr")


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    u = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * (1.0 + math.cos(math.pi * u)) / 2.0


def lambda_at(step: int, total_steps: int, target: float, warmup_frac: float) -> float:
    """Linear warmup of the distillation weight, then constant."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    horizon = warmup_frac * total_steps
    if horizon <= 0 or step >= horizon:
        return target
    return target * step / horizon


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 2
    # Desk-scale default; large-scale runs use 1e-4 (see paper_preset docs).
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    batch_size: int = 8
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    lambda_target: float = 0.1
    lambda_warmup_frac: float = 0.1
    mu0: float = 0.996
    subset_sampling: str = "uniform"  # or "none"
    ablate_rcmd: bool = False
    ablate_pacm: bool = False
    pacm_teacher: str = "shared"  # or "separate"
    checkpoint_interval: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.subset_sampling not in ("uniform", "none"):
            raise ConfigError(f"unknown subset_sampling {self.subset_sampling!r}")
        if self.pacm_teacher not in ("shared", "separate"):
            raise ConfigError(f"unknown pacm_teacher {self.pacm_teacher!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _dataclass_from_dict(cls, data, "train config")


_NESTED = {"model": ModelConfig, "masking": MaskingConfig,
           "curriculum": CurriculumConfig, "augment": AugmentConfig}


def _dataclass_from_dict(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is TrainConfig and key in _NESTED:
            kwargs[key] = _dataclass_from_dict(_NESTED[key], value, key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        obj = cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad {what}: {e}") from e
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_mae: Optional[float]
    l_rcmd: Optional[float]
    lam: float
    mu: float
    tau: Optional[float]  # None during the uniform phase
    lr: float

    def row(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "l_mae": "" if self.l_mae is None else repr(self.l_mae),
            "l_rcmd": "" if self.l_rcmd is None else repr(self.l_rcmd),
            "lambda": repr(self.lam),
            "mu": repr(self.mu),
            "tau": "uniform" if self.tau is None else repr(self.tau),
            "lr": repr(self.lr),
        }


class PretrainRun:
    """Owns the model, teacher, optimizer and importance state for one run."""

    def __init__(self, cfg: TrainConfig, manifest: CohortManifest):
        cfg.validate()
        self.cfg = cfg
        self.manifest = manifest
        seed_torch(cfg.seed)

        self.model = MaskedAutoencoder(cfg.model)
        self.rcmd_heads = RCMDHeads(cfg.model.dim)
        self.teacher = make_teacher(self.model.encoder)
        self.pacm_teacher = (
            self.teacher if cfg.pacm_teacher == "shared" else make_teacher(self.model.encoder)
        )

        self.named_params = [
            (f"model.{n}", p) for n, p in self.model.named_parameters()
        ] + [(f"rcmd.{n}", p) for n, p in self.rcmd_heads.named_parameters()]
        self.optimizer = torch.optim.AdamW(
            [p for _, p in self.named_params],
            lr=cfg.base_lr,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=cfg.weight_decay,
        )

        self.grid = cfg.model.grid
        self.n_patches = self.grid.n_patches
        atlas = manifest.load_atlas()
        self.membership = build_membership_matrix(atlas, self.grid)
        weights = region_weights(manifest.region_classes)
        self.importance = ImportanceState.from_static(
            static_scores(self.membership, weights), cfg.curriculum.beta
        )

        self.train_subjects = [
            manifest.load_subject(e) for e in manifest.split("train")
        ]
        if not self.train_subjects:
            raise ConfigError("manifest has no training subjects")
        val_entries = manifest.split("val") or manifest.split("train")
        self.refresh_subjects = [
            manifest.load_subject(e) for e in val_entries[: cfg.batch_size]
        ]

        self.steps_per_epoch = math.ceil(len(self.train_subjects) / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.refresh_interval = max(1, round(cfg.curriculum.dynamic_refresh_frac * self.total_steps))
        self.step = 0

    # ------------------------------------------------------------------ data

    def _epoch_batches(self, epoch: int) -> list[list[SubjectRecord]]:
        order = substream(self.cfg.seed, "order", epoch).permutation(len(self.train_subjects))
        b = self.cfg.batch_size
        return [
            [self.train_subjects[i] for i in order[s : s + b]]
            for s in range(0, len(order), b)
        ]

    def _prepare_sample(self, record: SubjectRecord, slot: int):
        rng = substream(self.cfg.seed, "step", self.step, slot)
        if self.cfg.subset_sampling == "uniform":
            subset = sample_modality_subset(record.observed, rng)
        else:
            subset = canonical(record.observed)
        vols = {m: record.volumes[m] for m in subset}
        if self.cfg.augment.enabled:
            vols = augment(vols, self.cfg.augment, rng)
        plan = build_mask_plan(
            subset,
            self.n_patches,
            self.cfg.masking,
            self.importance,
            self.step,
            self.total_steps,
            self.cfg.curriculum,
            rng,
            force_uniform=self.cfg.ablate_pacm,
        )
        return subset, vols, plan

    def _collate(self, samples) -> tuple[dict, list[MaskPlan], list]:
        shape = self.cfg.model.volume_shape
        b = len(samples)
        volumes = {
            m: torch.zeros((b, *shape), dtype=torch.float32) for m in MODALITIES
        }
        plans, targets = [], []
        for i, (subset, vols, plan) in enumerate(samples):
            plans.append(plan)
            tgt = {}
            for m in subset:
                volumes[m][i] = torch.from_numpy(np.ascontiguousarray(vols[m]))
                tgt[m] = torch.from_numpy(partition_patches(vols[m], self.grid).astype(np.float32))
            targets.append(tgt)
        return volumes, plans, targets

    # ------------------------------------------------------------------ step

    def pretrain_step(self, batch: list[SubjectRecord]) -> StepRecord:
        """One optimization step over a batch of subject records."""
        cfg = self.cfg
        samples = [self._prepare_sample(r, i) for i, r in enumerate(batch)]
        volumes, plans, targets = self._collate(samples)
        subsets = [s[0] for s in samples]

        lam = lambda_at(self.step, self.total_steps, cfg.lambda_target, cfg.lambda_warmup_frac)
        mu = momentum_at(self.step, self.total_steps, cfg.mu0)
        lr = lr_at(
            self.step,
            self.total_steps,
            cfg.warmup_epochs * self.steps_per_epoch,
            cfg.base_lr,
        )
        tau = (
            UNIFORM
            if cfg.ablate_pacm
            else temperature_at(self.step, self.total_steps, cfg.curriculum)
        )

        self.model.train()
        out = self.model.forward_pretrain(volumes, plans)

        mae_terms = []
        for i, subset in enumerate(subsets):
            recon = ReconstructionBatch(
                predictions={m: out.predictions[m][i] for m in subset},
                targets=targets[i],
                masked={m: plans[i].masked[m] for m in subset},
            )
            try:
                mae_terms.append(mae_loss(recon, subset))
            except UndefinedLossError:
                mae_terms.append(None)

        rcmd_terms: list[Optional[torch.Tensor]] = [None] * len(batch)
        if not cfg.ablate_rcmd:
            paired = [
                i
                for i, subset in enumerate(subsets)
                if PET in subset
                and len(plans[i].visible[PET])
                and any(len(plans[i].visible[m]) for m in subset if m != PET)
            ]
            if paired:
                with torch.no_grad():
                    t_out, t_batch = self.teacher(volumes, plans)
                for i in paired:
                    z_mri_s, z_pet_s = group_pool(
                        out.encoder.tokens[i], out.batch.key_mask[i], self.n_patches
                    )
                    z_mri_t, z_pet_t = group_pool(
                        t_out.tokens[i], t_batch.key_mask[i], self.n_patches
                    )
                    rcmd_terms[i] = rcmd_loss(
                        z_mri_s, z_pet_s, z_mri_t, z_pet_t, self.rcmd_heads
                    )

        per_sample = []
        for m_term, r_term in zip(mae_terms, rcmd_terms):
            term = m_term if m_term is not None else torch.zeros(())
            if r_term is not None:
                term = term + lam * r_term
            per_sample.append(term)
        loss = torch.stack(per_sample).mean()

        if not torch.isfinite(loss):
            snap = Path("diverged_snapshot.ckpt")
            self.save(snap, note="non-finite loss")
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step}; snapshot at {snap}"
            )

        self.optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(
                    [p for _, p in self.named_params], cfg.grad_clip
                )
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()

        ema_update(self.teacher, self.model.encoder, mu)
        if self.pacm_teacher is not self.teacher:
            ema_update(self.pacm_teacher, self.model.encoder, mu)

        if not cfg.ablate_pacm and (self.step + 1) % self.refresh_interval == 0:
            self.refresh_dynamic_scores()

        mae_vals = [float(t.detach()) for t in mae_terms if t is not None]
        rcmd_vals = [float(t.detach()) for t in rcmd_terms if t is not None]
        record = StepRecord(
            step=self.step,
            epoch=self.step // self.steps_per_epoch,
            l_mae=sum(mae_vals) / len(mae_vals) if mae_vals else None,
            l_rcmd=sum(rcmd_vals) / len(rcmd_vals) if rcmd_vals else None,
            lam=lam,
            mu=mu,
            tau=None if tau is UNIFORM else float(tau),
            lr=lr,
        )
        self.step += 1
        return record

    def refresh_dynamic_scores(self) -> None:
        """Re-extract teacher CLS attention on a held-out, fully visible batch
        and fold it into the dynamic importance scores."""
        batch = self.refresh_subjects
        samples = []
        for record in batch:
            obs = canonical(record.observed)
            plan = MaskPlan.full_visibility(obs, self.n_patches)
            samples.append((obs, {m: record.volumes[m] for m in obs}, plan))
        volumes, plans, _ = self._collate(samples)
        with torch.no_grad():
            enc_out, token_batch = self.pacm_teacher(volumes, plans)
        # Final layer, head-averaged CLS row, restricted to T1 patch slots.
        rows = enc_out.cls_attention[-1].mean(dim=1)  # (B, S)
        sl = modality_slice(T1, self.n_patches)
        t1_rows = rows[:, sl]
        included = token_batch.key_mask[:, sl]
        has_t1 = included.any(dim=1)
        if not bool(has_t1.any()):
            return
        attn = (t1_rows * included)[has_t1].mean(dim=0).numpy().astype(np.float64)
        self.importance.update_dynamic(
            dynamic_scores_from_attention(attn, self.membership)
        )

    # ----------------------------------------------------------- persistence

    def save(self, path, note: str = "") -> None:
        tensors = {}
        tensors.update(module_tensors(self.model, "model"))
        tensors.update(module_tensors(self.teacher, "teacher"))
        if self.pacm_teacher is not self.teacher:
            tensors.update(module_tensors(self.pacm_teacher, "pacm_teacher"))
        tensors.update(module_tensors(self.rcmd_heads, "rcmd"))
        tensors.update(optimizer_tensors(self.optimizer, self.named_params))
        tensors["importance.s_static"] = self.importance.s_static
        tensors["importance.s_dynamic"] = self.importance.s_dynamic
        tensors["importance.s_combined"] = self.importance.s_combined
        tensors["torch_rng"] = torch.get_rng_state().numpy()
        header = {
            "kind": "pretrain",
            "step": self.step,
            "total_steps": self.total_steps,
            "seed": self.cfg.seed,
            "note": note,
            "config": self.cfg.to_dict(),
        }
        save_checkpoint(path, header, tensors)

    def restore(self, path) -> None:
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "pretrain":
            raise ConfigError(f"{path} is not a pretraining checkpoint")
        load_module_tensors(self.model, tensors, "model")
        load_module_tensors(self.teacher, tensors, "teacher")
        if self.pacm_teacher is not self.teacher:
            prefix = "pacm_teacher" if any(k.startswith("pacm_teacher.") for k in tensors) else "teacher"
            load_module_tensors(self.pacm_teacher, tensors, prefix)
        load_module_tensors(self.rcmd_heads, tensors, "rcmd")
        load_optimizer_tensors(self.optimizer, self.named_params, tensors)
        self.importance.s_static = tensors["importance.s_static"].astype(np.float64)
        self.importance.s_dynamic = tensors["importance.s_dynamic"].astype(np.float64)
        self.importance.s_combined = tensors["importance.s_combined"].astype(np.float64)
        torch.set_rng_state(torch.from_numpy(tensors["torch_rng"]))
        self.step = int(header["step"])


def run_pretraining(
    cfg: TrainConfig,
    manifest: CohortManifest,
    out_dir,
    resume: Optional[str] = None,
    max_steps: Optional[int] = None,
) -> tuple[Path, Path]:
    """Train to completion (or ``max_steps``), logging one CSV row per step.

    Returns (final checkpoint path, log path). With ``resume``, continues
    from the checkpointed step; the log then covers only the new steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = PretrainRun(cfg, manifest)
    if resume is not None:
        run.restore(resume)

    columns = [c for c in LOG_COLUMNS if not (cfg.ablate_rcmd and c == "l_rcmd")]
    log_path = out_dir / "log.csv"
    final_path = out_dir / "final.ckpt"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        stop = run.total_steps if max_steps is None else min(run.total_steps, run.step + max_steps)
        while run.step < stop:
            epoch = run.step // run.steps_per_epoch
            batches = run._epoch_batches(epoch)
            for b_idx in range(run.step % run.steps_per_epoch, len(batches)):
                record = run.pretrain_step(batches[b_idx])
                writer.writerow(record.row())
                if cfg.checkpoint_interval and run.step % cfg.checkpoint_interval == 0:
                    run.save(out_dir / f"step_{run.step:06d}.ckpt")
                if run.step >= stop:
                    break
    run.save(final_path)
    return final_path, log_path
