"""Shared 3D transformer encoder and per-modality decoders.

Token layout is fixed regardless of availability: slot 0 is CLS, then N
patch slots per modality in canonical order, so modality m's patch i
always sits at 1 + index(m) * N + i. Missing or masked slots hold zeros
and are removed from attention by a key bitmask whose excluded logits are
set to -inf, which makes the encoder equivalent to running on the
physically shortened sequence.
"""

import copy
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .masking import MaskPlan
from .modalities import MODALITIES, modality_index
from .volumes import PatchGrid


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_heads: int = 4
    n_layers: int = 4
    decoder_dim: int = 32
    decoder_blocks: int = 2
    decoder_heads: int = 4
    patch: int = 8
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by "
                f"decoder_heads {self.decoder_heads}"
            )
        if self.decoder_blocks < 1:
            raise ConfigError("decoder needs at least the cross-attention block")
        PatchGrid(self.volume_shape, self.patch)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.volume_shape, self.patch)

    @property
    def n_patches(self) -> int:
        return self.grid.n_patches

    @property
    def seq_len(self) -> int:
        return 1 + len(MODALITIES) * self.n_patches


def desk_preset() -> ModelConfig:
    """CPU-sized default: 32^3 volumes, p=8 (N=64), 4-layer dim-64 encoder."""
    return ModelConfig()


def paper_preset() -> ModelConfig:
    """ViT-B-sized configuration (128^3 volumes, p=16, N=512)."""
    return ModelConfig(
        dim=768,
        n_heads=12,
        n_layers=12,
        decoder_dim=384,
        decoder_blocks=2,
        decoder_heads=12,
        patch=16,
        volume_shape=(128, 128, 128),
    )


def positional_embedding_3d(grid: PatchGrid, dim: int) -> torch.Tensor:
    """Axis-factorized 3D sinusoidal table of shape (N, dim), float64.

    Each axis gets 2 * (dim // 6) dims ([sin | cos] over a standard
    1/10000^(j/f) frequency ladder of the block coordinate); blocks are
    concatenated in (z, y, x) order and any remainder dims stay zero.
    """
    per_axis = 2 * (dim // 6)
    if per_axis == 0:
        raise ConfigError(f"dim {dim} too small for 3 sin/cos axis blocks")
    half = per_axis // 2
    omega = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))

    bz, by, bx = grid.blocks
    zz, yy, xx = np.meshgrid(
        np.arange(bz, dtype=np.float64),
        np.arange(by, dtype=np.float64),
        np.arange(bx, dtype=np.float64),
        indexing="ij",
    )
    table = np.zeros((grid.n_patches, dim), dtype=np.float64)
    for axis, coords in enumerate((zz, yy, xx)):
        phase = coords.reshape(-1, 1) * omega
        block = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
        table[:, axis * per_axis : (axis + 1) * per_axis] = block
    return torch.from_numpy(table)


class TokenBatch(NamedTuple):
    """Fixed-layout token matrix plus its attention-participation bitmask."""

    tokens: torch.Tensor  # (B, S, dim)
    key_mask: torch.Tensor  # (B, S) bool, True = participates in attention


class EncoderOutput(NamedTuple):
    tokens: torch.Tensor  # (B, S, dim) post final norm
    cls: torch.Tensor  # (B, dim)
    cls_attention: torch.Tensor  # (L, B, H, S) CLS-row attention per layer


def modality_slice(m: str, n_patches: int) -> slice:
    i = modality_index(m)
    return slice(1 + i * n_patches, 1 + (i + 1) * n_patches)


class _Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor]):
        b, s, c = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, s, c)
        return self.drop(self.proj(out)), probs


class _Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.act(self.fc1(x))))


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, ratio, dropout)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor]):
        attn_out, probs = self.attn(self.norm1(x), key_mask)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, probs


class _CrossAttention(nn.Module):
    """Queries from decoder slots, keys/values from encoder context."""

    def __init__(self, dim: int, ctx_dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(ctx_dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, key_mask: torch.Tensor):
        b, nq, c = x.shape
        s = ctx.shape[1]
        q = self.q(x).reshape(b, nq, self.n_heads, self.head_dim).transpose(1, 2)
        kv = self.kv(ctx).reshape(b, s, 2, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv.unbind(0)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = (logits.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, nq, c)
        return self.drop(self.proj(out))


class MultiModalEncoder(nn.Module):
    """Per-modality tokenizers plus the shared masked transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_patches = cfg.n_patches
        self.tokenizers = nn.ModuleDict(
            {m: nn.Conv3d(1, cfg.dim, kernel_size=cfg.patch, stride=cfg.patch) for m in MODALITIES}
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.register_buffer(
            "pos_table", positional_embedding_3d(cfg.grid, cfg.dim).to(torch.float32)
        )
        self.blocks = nn.ModuleList(
            _Block(cfg.dim, cfg.n_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for tok in self.tokenizers.values():
            w = tok.weight.data
            nn.init.xavier_uniform_(w.view(w.shape[0], -1))
            nn.init.zeros_(tok.bias)
        self.apply(_init_linear)

    def visibility_masks(self, plans: Sequence[MaskPlan]) -> dict[str, torch.Tensor]:
        """Per-modality (B, N) visibility from per-sample mask plans."""
        out = {}
        for m in MODALITIES:
            vis = torch.zeros(len(plans), self.n_patches, dtype=torch.bool)
            for b, plan in enumerate(plans):
                idx = plan.visible[m]
                if len(idx):
                    vis[b, torch.from_numpy(np.asarray(idx))] = True
            out[m] = vis
        return out

    def tokenize(self, volumes: dict[str, torch.Tensor], plans: Sequence[MaskPlan]) -> TokenBatch:
        """Project visible patches into their layout slots.

        ``volumes[m]`` is (B, D, H, W); samples missing a modality carry a
        zero volume and an empty visible set. Visible slots receive the
        patch projection plus the positional code; masked and missing
        slots stay exactly zero and are bitmask-excluded.
        """
        some = next(iter(volumes.values()))
        b = some.shape[0]
        if len(plans) != b:
            raise DataError(f"{len(plans)} plans for a batch of {b}")
        dtype = self.cls_token.dtype
        tokens = torch.zeros(b, self.cfg.seq_len, self.cfg.dim, dtype=dtype)
        key_mask = torch.zeros(b, self.cfg.seq_len, dtype=torch.bool)
        key_mask[:, 0] = True
        tokens[:, 0] = self.cls_token.to(dtype)

        vis_masks = self.visibility_masks(plans)
        pos = self.pos_table.to(dtype)
        for m, vol in volumes.items():
            vis = vis_masks[m]
            if not vis.any():
                continue
            proj = self.tokenizers[m](vol.unsqueeze(1).to(dtype))
            proj = proj.flatten(2).transpose(1, 2)  # (B, N, dim), z-major order
            sl = modality_slice(m, self.n_patches)
            tokens[:, sl] = (proj + pos) * vis.unsqueeze(-1)
            key_mask[:, sl] = vis
        return TokenBatch(tokens, key_mask)

    def encode(self, tokens: torch.Tensor, key_mask: torch.Tensor) -> EncoderOutput:
        """Run the masked transformer; excluded positions neither attend in
        nor out of included rows (their logits are -inf before softmax)."""
        if not bool(key_mask[:, 0].all()):
            raise DataError("CLS must participate in attention")
        x = tokens
        cls_rows = []
        for blk in self.blocks:
            x, probs = blk(x, key_mask)
            cls_rows.append(probs[:, :, 0, :])
        x = self.norm(x)
        cls_attn = torch.stack(cls_rows, dim=0)  # (L, B, H, S)
        return EncoderOutput(tokens=x, cls=x[:, 0], cls_attention=cls_attn)

    def forward(self, volumes: dict[str, torch.Tensor], plans: Sequence[MaskPlan]):
        batch = self.tokenize(volumes, plans)
        return self.encode(batch.tokens, batch.key_mask), batch


class ModalityDecoder(nn.Module):
    """Reconstructs all N patches of one modality from encoder output.

    Queries are the modality's own encoder outputs at visible slots and a
    learned mask token elsewhere, plus learned decoder positions; one
    cross-attention block reads the included encoder positions, followed
    by self-attention blocks and a linear voxel head.
    """

    def __init__(self, cfg: ModelConfig, modality: str):
        super().__init__()
        self.modality = modality
        self.slot = modality_slice(modality, cfg.n_patches)
        dd = cfg.decoder_dim
        self.embed = nn.Linear(cfg.dim, dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.dec_pos = nn.Parameter(torch.zeros(cfg.n_patches, dd))
        self.norm_q = nn.LayerNorm(dd)
        self.norm_ctx = nn.LayerNorm(dd)
        self.cross = _CrossAttention(dd, dd, cfg.decoder_heads, cfg.dropout)
        self.norm_mlp = nn.LayerNorm(dd)
        self.mlp = _Mlp(dd, cfg.mlp_ratio, cfg.dropout)
        self.self_blocks = nn.ModuleList(
            _Block(dd, cfg.decoder_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.decoder_blocks - 1)
        )
        self.norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, cfg.patch**3)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.dec_pos, std=0.02)
        self.apply(_init_linear)

    def forward(
        self, enc_tokens: torch.Tensor, key_mask: torch.Tensor, visible: torch.Tensor
    ) -> torch.Tensor:
        """(B, S, dim) encoder output -> (B, N, patch^3) predictions."""
        ctx = self.embed(enc_tokens)
        own = ctx[:, self.slot]
        q = torch.where(visible.unsqueeze(-1), own, self.mask_token.to(own.dtype))
        q = q + self.dec_pos.to(own.dtype)
        # Keys/values are the included patch representations; CLS stays a
        # classification readout and is not consumed by reconstruction.
        patch_keys = key_mask.clone()
        patch_keys[:, 0] = False
        x = q + self.cross(self.norm_q(q), self.norm_ctx(ctx), patch_keys)
        x = x + self.mlp(self.norm_mlp(x))
        full = torch.ones(x.shape[0], x.shape[1], dtype=torch.bool)
        for blk in self.self_blocks:
            x, _ = blk(x, full)
        return self.head(self.norm(x))


class PretrainOutput(NamedTuple):
    predictions: dict[str, torch.Tensor]  # modality -> (B, N, patch^3)
    encoder: EncoderOutput
    batch: TokenBatch


class MaskedAutoencoder(nn.Module):
    """Student network: shared encoder plus per-modality decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = MultiModalEncoder(cfg)
        self.decoders = nn.ModuleDict({m: ModalityDecoder(cfg, m) for m in MODALITIES})

    def forward_pretrain(
        self, volumes: dict[str, torch.Tensor], plans: Sequence[MaskPlan]
    ) -> PretrainOutput:
        enc_out, batch = self.encoder(volumes, plans)
        vis_masks = self.encoder.visibility_masks(plans)
        preds = {}
        for m in volumes:
            preds[m] = self.decoders[m](enc_out.tokens, batch.key_mask, vis_masks[m])
        return PretrainOutput(predictions=preds, encoder=enc_out, batch=batch)


class TaskHead(nn.Module):
    """Layer norm + linear readout on the CLS output; one logit/value."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, 1)
        self.apply(_init_linear)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(cls)).squeeze(-1)


def _init_linear(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def make_teacher(encoder: MultiModalEncoder) -> MultiModalEncoder:
    """Gradient-free deep copy used as the EMA teacher."""
    teacher = copy.deepcopy(encoder)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)
