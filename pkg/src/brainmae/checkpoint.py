"""Checkpoint archive: a zip of named tensors plus a JSON header.

Tensor names are module paths (e.g. ``model.encoder.blocks.0.attn.qkv.weight``)
so checkpoints stay portable across implementations. The header echoes the
config, step count and RNG state.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError

CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = {"schema_version": CHECKPOINT_SCHEMA_VERSION, **header}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, np.asarray(tensors[name]))
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            tensors = {}
            for info in zf.infolist():
                if info.filename.startswith("tensors/") and info.filename.endswith(".npy"):
                    name = info.filename[len("tensors/") : -len(".npy")]
                    tensors[name] = np.load(io.BytesIO(zf.read(info.filename)))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint {path} is malformed: {e}") from e
    if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"checkpoint {path}: unsupported schema version")
    return header, tensors


def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict into named numpy tensors."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    return out


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    skip = len(prefix) + 1
    for name, value in tensors.items():
        if name.startswith(prefix + "."):
            state[name[skip:]] = torch.from_numpy(np.asarray(value))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise DataError(f"checkpoint missing tensors under {prefix!r}: {sorted(missing)[:5]}")
    module.load_state_dict(state)


def optimizer_tensors(
    opt: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]]
) -> dict[str, np.ndarray]:
    """Serialize AdamW moments keyed by parameter name."""
    out = {}
    for name, param in named_params:
        state = opt.state.get(param)
        if not state:
            continue
        out[f"optim.{name}.step"] = np.asarray(float(state["step"]))
        out[f"optim.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return out


def load_optimizer_tensors(
    opt: torch.optim.Optimizer,
    named_params: list[tuple[str, torch.Tensor]],
    tensors: dict[str, np.ndarray],
) -> None:
    for name, param in named_params:
        key = f"optim.{name}.step"
        if key not in tensors:
            continue
        opt.state[param] = {
            "step": torch.tensor(float(tensors[key])),
            "exp_avg": torch.from_numpy(np.asarray(tensors[f"optim.{name}.exp_avg"])).clone(),
            "exp_avg_sq": torch.from_numpy(
                np.asarray(tensors[f"optim.{name}.exp_avg_sq"])
            ).clone(),
        }
