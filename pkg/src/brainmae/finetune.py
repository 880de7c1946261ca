"""Downstream adaptation: task heads on the CLS output.

Finetuning removes patch-level masking (full-visibility plans); missing
modalities stay zeroed and attention-blocked exactly as in pretraining.
Modality dropout hardens the head against absent inputs. The encoder is
frozen for the first epochs, early stopping tracks validation loss, and
the parameters with the best validation loss are returned.
"""

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .cohort import CohortManifest, SubjectRecord
from .errors import ConfigError, DataError
from .masking import MaskPlan
from .metrics import (
    MetricsReport,
    compute_classification_metrics,
    compute_regression_metrics,
)
from .modalities import MODALITIES, canonical, combination_tag, modality_dropout
from .model import MaskedAutoencoder, ModelConfig, MultiModalEncoder, TaskHead, seed_torch
from .pretrain import TrainConfig, _dataclass_from_dict
from .rng import substream

TASKS = ("CN_vs_AD", "CN_vs_MCI", "MMSE", "AGE")

_CLASSIFICATION_POSITIVE = {"CN_vs_AD": "AD", "CN_vs_MCI": "MCI"}


def task_kind(task: str) -> str:
    if task in _CLASSIFICATION_POSITIVE:
        return "classification"
    if task in ("MMSE", "AGE"):
        return "regression"
    raise ConfigError(f"unknown task {task!r}")


def task_label(record, task: str) -> Optional[float]:
    """Target for a subject, or None when the subject is out of scope."""
    if task in _CLASSIFICATION_POSITIVE:
        if record.diagnosis == "CN":
            return 0.0
        if record.diagnosis == _CLASSIFICATION_POSITIVE[task]:
            return 1.0
        return None
    if task == "MMSE":
        return record.mmse
    if task == "AGE":
        return record.age
    raise ConfigError(f"unknown task {task!r}")


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    # Readout-only learning rate; None falls back to ``lr``. The head is a
    # ~d-parameter linear map and tolerates a much larger step size than
    # the encoder at desk scale.
    head_lr: Optional[float] = None
    weight_decay: float = 0.05
    max_epochs: int = 100
    patience: int = 15
    freeze_epochs: int = 5
    modality_dropout_rate: float = 0.2
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not self.freeze_epochs < self.max_epochs:
            raise ConfigError("freeze_epochs must be < max_epochs")
        if not 0.0 <= self.modality_dropout_rate <= 1.0:
            raise ConfigError("modality_dropout_rate must be in [0, 1]")
        if self.patience <= 0 or self.batch_size <= 0:
            raise ConfigError("patience and batch_size must be positive")

    @property
    def effective_head_lr(self) -> float:
        return self.lr if self.head_lr is None else self.head_lr

    @classmethod
    def from_dict(cls, data: dict) -> "FinetuneConfig":
        return _dataclass_from_dict(cls, data, "finetune config")


class FinetunedModel:
    """Encoder + task head bundle with batched prediction."""

    def __init__(self, encoder: MultiModalEncoder, head: TaskHead, task: str):
        self.encoder = encoder
        self.head = head
        self.task = task

    @property
    def model_config(self) -> ModelConfig:
        return self.encoder.cfg

    def predict(
        self,
        records: Sequence[SubjectRecord],
        observed_override: Optional[Sequence[str]] = None,
        batch_size: int = 16,
    ) -> np.ndarray:
        """Scores for each record: probabilities for classification tasks,
        raw values for regression. ``observed_override`` evaluates the
        records as if only that modality subset had been acquired."""
        self.encoder.eval()
        self.head.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                volumes, plans = _collate_full_visibility(
                    chunk, self.model_config, observed_override
                )
                enc_out, _ = self.encoder(volumes, plans)
                logits = self.head(enc_out.cls)
                out.append(logits.detach())
        scores = torch.cat(out).numpy().astype(np.float64)
        if task_kind(self.task) == "classification":
            scores = 1.0 / (1.0 + np.exp(-scores))
        return scores

    def save(self, path, extra_header: Optional[dict] = None) -> None:
        tensors = {}
        tensors.update(module_tensors(self.encoder, "encoder"))
        tensors.update(module_tensors(self.head, "head"))
        header = {
            "kind": "finetune",
            "task": self.task,
            "model_config": _model_config_dict(self.model_config),
            **(extra_header or {}),
        }
        save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path) -> "FinetunedModel":
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "finetune":
            raise ConfigError(f"{path} is not a finetuned-model checkpoint")
        cfg = _dataclass_from_dict(ModelConfig, header["model_config"], "model config")
        encoder = MultiModalEncoder(cfg)
        head = TaskHead(cfg.dim)
        load_module_tensors(encoder, tensors, "encoder")
        load_module_tensors(head, tensors, "head")
        return cls(encoder, head, header["task"])


def _model_config_dict(cfg: ModelConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def load_pretrained_encoder(path) -> tuple[MultiModalEncoder, ModelConfig]:
    """Extract the student encoder from a pretraining checkpoint."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "pretrain":
        raise ConfigError(f"{path} is not a pretraining checkpoint")
    cfg = TrainConfig.from_dict(header["config"])
    model = MaskedAutoencoder(cfg.model)
    load_module_tensors(model, tensors, "model")
    return model.encoder, cfg.model


def _collate_full_visibility(
    records: Sequence[SubjectRecord],
    model_cfg: ModelConfig,
    observed_override: Optional[Sequence[str]] = None,
) -> tuple[dict, list[MaskPlan]]:
    n = model_cfg.n_patches
    shape = model_cfg.volume_shape
    volumes = {m: torch.zeros((len(records), *shape), dtype=torch.float32) for m in MODALITIES}
    plans = []
    for i, rec in enumerate(records):
        obs = canonical(rec.observed)
        if observed_override is not None:
            obs = tuple(m for m in canonical(observed_override) if m in rec.observed)
            if not obs:
                raise DataError(
                    f"subject {rec.subject_id} observes none of {observed_override}"
                )
        for m in obs:
            volumes[m][i] = torch.from_numpy(np.ascontiguousarray(rec.volumes[m]))
        plans.append(MaskPlan.full_visibility(obs, n))
    return volumes, plans


def _labeled(records: Sequence[SubjectRecord], task: str):
    out = []
    for r in records:
        y = task_label(r, task)
        if y is not None:
            out.append((r, float(y)))
    return out


def evaluate_records(
    bundle: FinetunedModel, records: Sequence[SubjectRecord],
    observed_override: Optional[Sequence[str]] = None,
):
    """(metrics, n) for labeled records under an optional modality subset."""
    pairs = _labeled(records, bundle.task)
    if not pairs:
        raise DataError(f"no labeled subjects for task {bundle.task}")
    labels = np.array([y for _, y in pairs])
    scores = bundle.predict([r for r, _ in pairs], observed_override)
    if task_kind(bundle.task) == "classification":
        return compute_classification_metrics(labels.astype(int), scores), len(pairs)
    return compute_regression_metrics(labels, scores), len(pairs)


def finetune(
    checkpoint: Optional[str],
    manifest: CohortManifest,
    task: str,
    cfg: FinetuneConfig,
    model_cfg: Optional[ModelConfig] = None,
    train_entries=None,
) -> tuple[FinetunedModel, MetricsReport]:
    """Train a task head (and, after the freeze, the encoder) on the train
    split; early-stop on validation loss; return the best-validation model
    and a validation metrics report.

    ``checkpoint=None`` trains from random initialization (the scratch
    baseline); ``train_entries`` restricts training to a subset of the
    train split (label-efficiency protocol).
    """
    cfg.validate()
    kind = task_kind(task)

    if checkpoint is not None:
        encoder, model_cfg = load_pretrained_encoder(checkpoint)
    else:
        if model_cfg is None:
            raise ConfigError("scratch finetuning requires a model config")
        seed_torch(cfg.seed)
        encoder = MultiModalEncoder(model_cfg)
    seed_torch(cfg.seed + 1)
    head = TaskHead(model_cfg.dim)

    entries = train_entries if train_entries is not None else manifest.split("train")
    train = _labeled([manifest.load_subject(e) for e in entries], task)
    val = _labeled([manifest.load_subject(e) for e in manifest.split("val")], task)
    if not train:
        raise ConfigError(f"no labeled training subjects for task {task}")
    if not val:
        raise ConfigError(f"no labeled validation subjects for task {task}")

    loss_fn = nn.BCEWithLogitsLoss() if kind == "classification" else nn.MSELoss()
    enc_params = list(encoder.parameters())
    optimizer = torch.optim.AdamW(
        [
            {"params": enc_params, "lr": 0.0},
            {"params": list(head.parameters()), "lr": cfg.effective_head_lr},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )

    best_val = math.inf
    best_state = None
    since_best = 0
    n = len(train)
    for epoch in range(cfg.max_epochs):
        frozen = epoch < cfg.freeze_epochs
        for p in enc_params:
            p.requires_grad_(not frozen)
        optimizer.param_groups[0]["lr"] = 0.0 if frozen else cfg.lr

        encoder.train()
        head.train()
        order = substream(cfg.seed, "ft_order", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch, targets = [], []
            for j, i in enumerate(idx):
                rec, y = train[int(i)]
                rng = substream(cfg.seed, "ft_dropout", epoch, start + j)
                kept = modality_dropout(rec.observed, cfg.modality_dropout_rate, rng)
                batch.append((rec, kept))
                targets.append(y)
            volumes, plans = _collate_dropped(batch, model_cfg)
            enc_out, _ = encoder(volumes, plans)
            logits = head(enc_out.cls)
            loss = loss_fn(logits, torch.tensor(targets, dtype=logits.dtype))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

        val_loss = _validation_loss(encoder, head, val, model_cfg, loss_fn)
        if val_loss < best_val:
            best_val = val_loss
            best_state = (
                copy.deepcopy(encoder.state_dict()),
                copy.deepcopy(head.state_dict()),
            )
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    encoder.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    for p in enc_params:
        p.requires_grad_(True)
    bundle = FinetunedModel(encoder, head, task)

    report = MetricsReport(metadata={"split": "val", "positive_class": _CLASSIFICATION_POSITIVE.get(task)})
    metrics, n_val = evaluate_records(bundle, [r for r, _ in val])
    combos = sorted({combination_tag(r.observed) for r, _ in val})
    report.add(task, "|".join(combos) if len(combos) > 1 else combos[0], cfg.seed, n_val, metrics)
    return bundle, report


def _collate_dropped(batch, model_cfg: ModelConfig):
    records = []
    for rec, kept in batch:
        records.append(
            SubjectRecord(
                subject_id=rec.subject_id,
                observed=kept,
                volumes={m: rec.volumes[m] for m in kept},
                diagnosis=rec.diagnosis,
                mmse=rec.mmse,
                age=rec.age,
            )
        )
    return _collate_full_visibility(records, model_cfg)


def _validation_loss(encoder, head, val, model_cfg, loss_fn, batch_size: int = 16) -> float:
    encoder.eval()
    head.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(val), batch_size):
            chunk = val[start : start + batch_size]
            volumes, plans = _collate_full_visibility([r for r, _ in chunk], model_cfg)
            enc_out, _ = encoder(volumes, plans)
            logits = head(enc_out.cls)
            targets = torch.tensor([y for _, y in chunk], dtype=logits.dtype)
            losses.append(float(loss_fn(logits, targets)) * len(chunk))
    return sum(losses) / len(val)
