import itertools

import numpy as np
import pytest
import torch

from brainmae.masking import MaskingConfig, MaskPlan, allocate_visible_budget
from brainmae.modalities import MODALITIES
from brainmae.model import (
    MaskedAutoencoder,
    ModelConfig,
    modality_slice,
    positional_embedding_3d,
    seed_torch,
)
from brainmae.rng import substream
from brainmae.volumes import PatchGrid


def reference_posemb(grid, dim):
    """Independent straightforward reimplementation of the position table."""
    per_axis = 2 * (dim // 6)
    half = per_axis // 2
    table = np.zeros((grid.n_patches, dim))
    for i in range(grid.n_patches):
        coords = grid.patch_coords(i)
        for axis in range(3):
            for j in range(half):
                omega = 1.0 / 10000.0 ** (j / half)
                table[i, axis * per_axis + j] = np.sin(coords[axis] * omega)
                table[i, axis * per_axis + half + j] = np.cos(coords[axis] * omega)
    return table


def random_plan(observed, n, rng, mask_cfg=MaskingConfig()):
    budgets = allocate_visible_budget(observed, n, mask_cfg, rng)
    vis = {m: np.sort(rng.choice(n, size=v, replace=False)) for m, v in budgets.items()}
    return MaskPlan.from_visible(n, vis)


class TestPositionalEmbedding:
    GRID = PatchGrid((32, 32, 32), 8)

    def test_z_only_difference_in_first_block(self):
        pe = positional_embedding_3d(self.GRID, 66).numpy()
        a = self.GRID.coords_to_index(1, 2, 3)
        b = self.GRID.coords_to_index(2, 2, 3)
        diff = pe[a] != pe[b]
        assert diff[:22].any()
        assert not diff[22:].any()

    def test_origin_phase(self):
        pe = positional_embedding_3d(self.GRID, 66).numpy()
        origin = pe[self.GRID.coords_to_index(0, 0, 0)]
        for axis in range(3):
            block = origin[axis * 22 : (axis + 1) * 22]
            np.testing.assert_array_equal(block[:11], 0.0)
            np.testing.assert_array_equal(block[11:], 1.0)

    def test_matches_reference_reimplementation(self):
        pe = positional_embedding_3d(self.GRID, 66).numpy()
        ref = reference_posemb(self.GRID, 66)
        assert np.abs(pe - ref).max() < 1e-12

    def test_remainder_dims_zero(self):
        pe = positional_embedding_3d(self.GRID, 64).numpy()
        np.testing.assert_array_equal(pe[:, 60:], 0.0)


class TestTokenize:
    @pytest.fixture(scope="class")
    def model(self, desk_cfg):
        seed_torch(0)
        return MaskedAutoencoder(desk_cfg)

    def test_missing_modality_excluded(self, model, desk_cfg, rng):
        n = desk_cfg.n_patches
        plan = random_plan(("T1", "T2"), n, rng)
        vols = {m: torch.rand(1, *desk_cfg.volume_shape) for m in ("T1", "T2")}
        batch = model.encoder.tokenize(vols, [plan])
        pet = modality_slice("PET", n)
        assert not batch.key_mask[0, pet].any()
        assert torch.all(batch.tokens[0, pet] == 0)

    def test_participating_token_count(self, model, desk_cfg, rng):
        n = desk_cfg.n_patches
        plan = random_plan(MODALITIES, n, rng)
        vols = {m: torch.rand(1, *desk_cfg.volume_shape) for m in MODALITIES}
        batch = model.encoder.tokenize(vols, [plan])
        assert int(batch.key_mask[0].sum()) == 1 + plan.visible_count()

    def test_zero_volume_zero_bias_gives_pure_posemb(self, desk_cfg, rng):
        seed_torch(1)
        model = MaskedAutoencoder(desk_cfg)
        n = desk_cfg.n_patches
        with torch.no_grad():
            model.encoder.tokenizers["T1"].bias.zero_()
        plan = MaskPlan.full_visibility(("T1",), n)
        vols = {"T1": torch.zeros(1, *desk_cfg.volume_shape)}
        batch = model.encoder.tokenize(vols, [plan])
        sl = modality_slice("T1", n)
        got = batch.tokens[0, sl]
        expected = model.encoder.pos_table
        assert torch.allclose(got, expected, atol=1e-7)


class TestEncode:
    @pytest.fixture(scope="class")
    def model(self, desk_cfg):
        seed_torch(2)
        m = MaskedAutoencoder(desk_cfg)
        m.eval()
        return m

    def test_compaction_equivalence_all_subsets(self, model, desk_cfg):
        """Outputs at included positions match a physically shortened run."""
        n = desk_cfg.n_patches
        for r in range(1, 5):
            for subset in itertools.combinations(MODALITIES, r):
                rng = substream(3, "compact", "+".join(subset))
                plan = random_plan(subset, n, rng)
                vols = {
                    m: torch.from_numpy(
                        rng.uniform(size=(1, *desk_cfg.volume_shape)).astype(np.float32)
                    )
                    for m in subset
                }
                batch = model.encoder.tokenize(vols, [plan])
                with torch.no_grad():
                    full = model.encoder.encode(batch.tokens, batch.key_mask)
                    inc = batch.key_mask[0]
                    short = model.encoder.encode(
                        batch.tokens[:, inc],
                        torch.ones(1, int(inc.sum()), dtype=torch.bool),
                    )
                a = full.tokens[0, inc]
                b = short.tokens[0]
                denom = b.abs().max()
                assert float((a - b).abs().max() / denom) < 1e-5, subset

    def test_single_token_plus_cls_attention(self, model, desk_cfg):
        n = desk_cfg.n_patches
        vis = {"T1": np.array([5])}
        plan = MaskPlan.from_visible(n, vis)
        vols = {"T1": torch.rand(1, *desk_cfg.volume_shape)}
        batch = model.encoder.tokenize(vols, [plan])
        with torch.no_grad():
            out = model.encoder.encode(batch.tokens, batch.key_mask)
        # CLS row over included keys sums to 1; with CLS + one token the
        # two weights sum to one per layer and head
        rows = out.cls_attention[:, 0]  # (L, H, S)
        included = batch.key_mask[0]
        sums = rows[..., included].sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert not rows[..., ~included].any()

    def test_excluded_content_changes_nothing_bitwise(self, model, desk_cfg):
        n = desk_cfg.n_patches
        rng = substream(4, "excl")
        plan = random_plan(("T1", "FLAIR"), n, rng)
        vols = {
            m: torch.from_numpy(rng.uniform(size=(1, *desk_cfg.volume_shape)).astype(np.float32))
            for m in ("T1", "FLAIR")
        }
        batch = model.encoder.tokenize(vols, [plan])
        tokens2 = batch.tokens.clone()
        excluded = torch.where(~batch.key_mask[0])[0]
        a, b = excluded[3].item(), excluded[7].item()
        tokens2[0, a], tokens2[0, b] = batch.tokens[0, b], batch.tokens[0, a]
        tokens2[0, excluded[10]] = 42.0
        with torch.no_grad():
            ref = model.encoder.encode(batch.tokens, batch.key_mask)
            perm = model.encoder.encode(tokens2, batch.key_mask)
        inc = batch.key_mask[0]
        assert torch.equal(ref.tokens[0, inc], perm.tokens[0, inc])

    def test_attention_rows_are_probabilities(self, model, desk_cfg):
        n = desk_cfg.n_patches
        rng = substream(5, "rows")
        plan = random_plan(MODALITIES, n, rng)
        vols = {m: torch.rand(1, *desk_cfg.volume_shape) for m in MODALITIES}
        batch = model.encoder.tokenize(vols, [plan])
        with torch.no_grad():
            out = model.encoder.encode(batch.tokens, batch.key_mask)
        sums = out.cls_attention.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


class TestDecode:
    @pytest.fixture(scope="class")
    def model(self, desk_cfg):
        seed_torch(6)
        m = MaskedAutoencoder(desk_cfg)
        m.eval()
        return m

    def test_output_shape_for_any_availability(self, model, desk_cfg, rng):
        n = desk_cfg.n_patches
        for subset in (("T1",), ("T1", "PET"), MODALITIES):
            plan = random_plan(subset, n, rng)
            vols = {m: torch.rand(2, *desk_cfg.volume_shape) for m in subset}
            out = model.forward_pretrain(vols, [plan, plan])
            for m in subset:
                assert out.predictions[m].shape == (2, n, desk_cfg.patch**3)

    def test_zero_weights_propagate_head_bias(self, desk_cfg):
        seed_torch(7)
        model = MaskedAutoencoder(desk_cfg)
        dec = model.decoders["T1"]
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
            dec.head.bias.fill_(0.25)
        n = desk_cfg.n_patches
        enc_tokens = torch.randn(1, desk_cfg.seq_len, desk_cfg.dim)
        key_mask = torch.ones(1, desk_cfg.seq_len, dtype=torch.bool)
        visible = torch.zeros(1, n, dtype=torch.bool)
        out = dec(enc_tokens, key_mask, visible)
        assert torch.allclose(out, torch.full_like(out, 0.25))

    def test_masked_loss_depends_on_visible_token(self, desk_cfg):
        """Finite-difference connectivity probe: perturbing a visible token
        changes the loss on a masked patch."""
        seed_torch(8)
        model = MaskedAutoencoder(desk_cfg)
        model.eval()
        n = desk_cfg.n_patches
        vis = {"T1": np.arange(1, n)}  # patch 0 masked, rest visible
        plan = MaskPlan.from_visible(n, vis)
        vols = {"T1": torch.rand(1, *desk_cfg.volume_shape)}
        batch = model.encoder.tokenize(vols, [plan])

        def masked_patch_loss(tokens):
            with torch.no_grad():
                enc = model.encoder.encode(tokens, batch.key_mask)
                pred = model.decoders["T1"](
                    enc.tokens, batch.key_mask,
                    torch.from_numpy(np.isin(np.arange(n), vis["T1"])).unsqueeze(0),
                )
            return float((pred[0, 0] ** 2).sum())

        base = masked_patch_loss(batch.tokens)
        slot = modality_slice("T1", n).start + 5  # a visible token
        h = 1e-3
        found = False
        for coord in range(0, desk_cfg.dim, 7):
            plus = batch.tokens.clone()
            plus[0, slot, coord] += h
            minus = batch.tokens.clone()
            minus[0, slot, coord] -= h
            grad = (masked_patch_loss(plus) - masked_patch_loss(minus)) / (2 * h)
            if abs(grad) > 1e-4:
                found = True
                break
        assert found, "masked-patch loss is disconnected from visible tokens"


class TestForwardPretrain:
    def test_runs_for_all_designated_combinations(self, desk_cfg):
        from brainmae.modalities import DESIGNATED_COMBINATIONS

        seed_torch(9)
        model = MaskedAutoencoder(desk_cfg)
        model.eval()
        n = desk_cfg.n_patches
        for combo in DESIGNATED_COMBINATIONS:
            rng = substream(10, "combo", "+".join(combo))
            plan = random_plan(combo, n, rng)
            vols = {m: torch.rand(1, *desk_cfg.volume_shape) for m in combo}
            out = model.forward_pretrain(vols, [plan])
            assert set(out.predictions) == set(combo)

    def test_eval_mode_bitwise_deterministic(self, desk_cfg, rng):
        seed_torch(10)
        model = MaskedAutoencoder(desk_cfg)
        model.eval()
        n = desk_cfg.n_patches
        plan = random_plan(MODALITIES, n, rng)
        vols = {m: torch.rand(1, *desk_cfg.volume_shape) for m in MODALITIES}
        with torch.no_grad():
            a = model.forward_pretrain(vols, [plan])
            b = model.forward_pretrain(vols, [plan])
        for m in MODALITIES:
            assert torch.equal(a.predictions[m], b.predictions[m])
        assert torch.equal(a.encoder.tokens, b.encoder.tokens)

    def test_desk_forward_under_two_seconds(self, desk_cfg, rng):
        import time

        seed_torch(11)
        model = MaskedAutoencoder(desk_cfg)
        model.eval()
        n = desk_cfg.n_patches
        plans = [random_plan(MODALITIES, n, substream(12, "t", i)) for i in range(2)]
        vols = {m: torch.rand(2, *desk_cfg.volume_shape) for m in MODALITIES}
        with torch.no_grad():
            model.forward_pretrain(vols, plans)  # warm up
            t0 = time.time()
            model.forward_pretrain(vols, plans)
            elapsed = time.time() - t0
        assert elapsed < 2.0


class TestConfig:
    def test_presets_representable(self):
        from brainmae.model import desk_preset, paper_preset

        desk = desk_preset()
        assert (desk.dim, desk.n_heads, desk.n_layers, desk.decoder_dim) == (64, 4, 4, 32)
        paper = paper_preset()
        assert (paper.dim, paper.n_heads, paper.n_layers) == (768, 12, 12)
        assert paper.decoder_dim == 384 and paper.decoder_blocks == 2
        assert paper.n_patches == 512

    def test_invalid_head_split_rejected(self):
        from brainmae.errors import ConfigError

        with pytest.raises(ConfigError):
            ModelConfig(dim=65, n_heads=4)
