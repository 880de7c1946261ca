import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainmae.errors import DataError, PairingError, UndefinedLossError
from brainmae.model import MultiModalEncoder, desk_preset, make_teacher, modality_slice, seed_torch
from brainmae.objectives import (
    RCMDHeads,
    ReconstructionBatch,
    ema_update,
    group_pool,
    mae_loss,
    momentum_at,
    per_patch_normalize,
    rcmd_loss,
    total_loss,
)


class TestPerPatchNormalize:
    def test_constant_patch_all_zeros(self):
        # float32 roundoff in the mean is amplified by 1/sqrt(eps)=1e3
        out = per_patch_normalize(torch.full((512,), 3.3))
        assert torch.allclose(out, torch.zeros(512), atol=1e-3)
        out64 = per_patch_normalize(torch.full((512,), 3.3, dtype=torch.float64))
        assert torch.allclose(out64, torch.zeros(512, dtype=torch.float64), atol=1e-9)

    def test_three_point_case(self):
        out = per_patch_normalize(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
        expected = torch.tensor([-1.2247448, 0.0, 1.2247448], dtype=torch.float64)
        assert torch.allclose(out, expected, atol=1e-4)

    def test_moments_contract(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            x = torch.rand(512, generator=g, dtype=torch.float64)
            out = per_patch_normalize(x)
            assert abs(float(out.mean())) < 1e-6
            assert abs(float(out.var(unbiased=False)) - 1.0) < 1e-3


class TestMaeLoss:
    def _batch(self, pred, target, masked):
        return ReconstructionBatch(
            predictions={"T1": pred}, targets={"T1": target}, masked={"T1": masked}
        )

    def test_perfect_prediction_zero(self):
        g = torch.Generator().manual_seed(1)
        target = torch.rand(8, 27, generator=g)
        pred = per_patch_normalize(target)
        batch = self._batch(pred, target, np.arange(8))
        assert float(mae_loss(batch, ("T1",))) == 0.0

    def test_unit_offset_single_patch(self):
        g = torch.Generator().manual_seed(2)
        target = torch.rand(4, 27, generator=g, dtype=torch.float64)
        pred = per_patch_normalize(target).clone()
        pred[2, 0] += 1.0
        batch = self._batch(pred, target, np.array([2]))
        assert float(mae_loss(batch, ("T1",))) == pytest.approx(1.0, abs=1e-9)

    def test_visible_predictions_ignored_bitwise(self):
        g = torch.Generator().manual_seed(3)
        target = torch.rand(8, 27, generator=g)
        pred = torch.rand(8, 27, generator=g)
        masked = np.array([1, 4])
        a = mae_loss(self._batch(pred, target, masked), ("T1",))
        pred2 = pred.clone()
        pred2[0] = 123.0
        pred2[7] = -55.0
        b = mae_loss(self._batch(pred2, target, masked), ("T1",))
        assert torch.equal(a, b)

    def test_all_empty_masked_sets_undefined(self):
        g = torch.Generator().manual_seed(4)
        target = torch.rand(4, 27, generator=g)
        batch = self._batch(target.clone(), target, np.array([], dtype=np.int64))
        with pytest.raises(UndefinedLossError):
            mae_loss(batch, ("T1",))

    def test_empty_modalities_excluded_from_average(self):
        g = torch.Generator().manual_seed(5)
        t1 = torch.rand(4, 27, generator=g)
        pet = torch.rand(4, 27, generator=g)
        batch = ReconstructionBatch(
            predictions={"T1": per_patch_normalize(t1), "PET": torch.zeros(4, 27)},
            targets={"T1": t1, "PET": pet},
            masked={"T1": np.array([0, 1]), "PET": np.array([], dtype=np.int64)},
        )
        # PET has no masked patches: loss equals the T1 term alone (0 here)
        assert float(mae_loss(batch, ("T1", "PET"))) == 0.0


class TestMomentum:
    def test_schedule_points(self):
        assert momentum_at(0, 100) == pytest.approx(0.996, abs=1e-12)
        assert momentum_at(50, 100) == pytest.approx(0.998, abs=1e-12)
        assert momentum_at(100, 100) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_nondecreasing(self):
        mus = [momentum_at(s, 500) for s in range(501)]
        assert all(b >= a for a, b in zip(mus, mus[1:]))


class TestEmaUpdate:
    def _pair(self):
        seed_torch(20)
        cfg = desk_preset()
        student = MultiModalEncoder(cfg)
        teacher = make_teacher(student)
        with torch.no_grad():
            for p in student.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        return student, teacher

    def test_mu_one_fixed_point(self):
        student, teacher = self._pair()
        before = {n: p.clone() for n, p in teacher.named_parameters()}
        ema_update(teacher, student, 1.0)
        for n, p in teacher.named_parameters():
            assert torch.equal(p, before[n])

    def test_mu_zero_copies_student(self):
        student, teacher = self._pair()
        ema_update(teacher, student, 0.0)
        s = dict(student.named_parameters())
        for n, p in teacher.named_parameters():
            assert torch.equal(p, s[n])

    def test_geometric_contraction(self):
        student, teacher = self._pair()
        student = student.double()
        teacher = teacher.double()
        mu = 0.9
        delta0 = {
            n: (p - dict(student.named_parameters())[n]).clone()
            for n, p in teacher.named_parameters()
        }
        for k in range(1, 6):
            ema_update(teacher, student, mu)
            s = dict(student.named_parameters())
            for n, p in teacher.named_parameters():
                expected = s[n] + mu**k * delta0[n]
                assert torch.allclose(p, expected, atol=1e-10), n

    def test_no_gradient_into_teacher(self):
        student, teacher = self._pair()
        assert all(not p.requires_grad for p in teacher.parameters())


class TestGroupPool:
    def _tokens(self, n=8, dim=6):
        seq = 1 + 4 * n
        g = torch.Generator().manual_seed(6)
        tokens = torch.rand(seq, dim, generator=g)
        key_mask = torch.zeros(seq, dtype=torch.bool)
        key_mask[0] = True
        return tokens, key_mask, n

    def test_singleton_groups(self):
        tokens, key_mask, n = self._tokens()
        key_mask[modality_slice("T2", n).start + 3] = True
        key_mask[modality_slice("PET", n).start + 1] = True
        z_mri, z_pet = group_pool(tokens, key_mask, n)
        assert torch.equal(z_mri, tokens[modality_slice("T2", n).start + 3])
        assert torch.equal(z_pet, tokens[modality_slice("PET", n).start + 1])

    def test_requires_both_groups(self):
        tokens, key_mask, n = self._tokens()
        key_mask[modality_slice("T1", n)] = True
        with pytest.raises(PairingError):
            group_pool(tokens, key_mask, n)

    def test_matches_index_list_oracle(self):
        tokens, key_mask, n = self._tokens()
        mri_idx = [modality_slice("T1", n).start + 2, modality_slice("FLAIR", n).start + 5]
        pet_idx = [modality_slice("PET", n).start + i for i in (0, 4, 7)]
        for i in mri_idx + pet_idx:
            key_mask[i] = True
        z_mri, z_pet = group_pool(tokens, key_mask, n)
        assert torch.allclose(z_mri, tokens[mri_idx].mean(0), atol=1e-7)
        assert torch.allclose(z_pet, tokens[pet_idx].mean(0), atol=1e-7)

    def test_excludes_masked_slots(self):
        tokens, key_mask, n = self._tokens()
        key_mask[modality_slice("T1", n)] = True
        key_mask[modality_slice("PET", n).start] = True
        masked_value = tokens[modality_slice("T2", n).start].clone()
        z_mri, _ = group_pool(tokens, key_mask, n)
        tokens[modality_slice("T2", n).start] = 999.0
        z_mri2, _ = group_pool(tokens, key_mask, n)
        assert torch.equal(z_mri, z_mri2)
        del masked_value


class TestRcmdLoss:
    def _heads(self, dim=16):
        seed_torch(21)
        return RCMDHeads(dim)

    def test_exact_agreement_is_zero(self):
        heads = self._heads()
        g = torch.Generator().manual_seed(7)
        z_mri = torch.randn(16, generator=g)
        z_pet = torch.randn(16, generator=g)
        with torch.no_grad():
            target_pet = heads.mri_to_pet(z_mri / z_mri.norm())
            target_mri = heads.pet_to_mri(z_pet / z_pet.norm())
        loss = rcmd_loss(z_mri, z_pet, target_mri, target_pet, heads)
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_anti_alignment_is_two(self):
        heads = self._heads()
        g = torch.Generator().manual_seed(8)
        z_mri = torch.randn(16, generator=g)
        z_pet = torch.randn(16, generator=g)
        with torch.no_grad():
            target_pet = -heads.mri_to_pet(z_mri / z_mri.norm())
            target_mri = -heads.pet_to_mri(z_pet / z_pet.norm())
        loss = rcmd_loss(z_mri, z_pet, target_mri, target_pet, heads)
        assert float(loss) == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal_is_one(self):
        heads = self._heads(dim=4)
        z_mri = torch.tensor([1.0, 0.0, 0.0, 0.0])
        z_pet = torch.tensor([0.0, 1.0, 0.0, 0.0])
        with torch.no_grad():
            p_pet = heads.mri_to_pet(z_mri)
            p_mri = heads.pet_to_mri(z_pet)
            # build targets orthogonal to the predictions
            def orth(v):
                u = torch.tensor([1.0, -1.0, 1.0, -1.0])
                u = u - (u @ v) / (v @ v) * v
                return u
            t_pet = orth(p_pet)
            t_mri = orth(p_mri)
        loss = rcmd_loss(z_mri, z_pet, t_mri, t_pet, heads)
        assert float(loss) == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 100.0))
    def test_scale_invariance_and_range(self, seed, scale):
        heads = self._heads()
        g = torch.Generator().manual_seed(seed)
        z = [torch.randn(16, generator=g) for _ in range(4)]
        base = rcmd_loss(*z, heads)
        scaled = rcmd_loss(z[0] * scale, z[1], z[2], z[3] * scale, heads)
        assert float(base) == pytest.approx(float(scaled), abs=1e-6)
        assert 0.0 <= float(base) <= 2.0

    def test_zero_norm_rejected(self):
        heads = self._heads()
        z = torch.randn(16)
        with pytest.raises(DataError):
            rcmd_loss(torch.zeros(16), z, z, z, heads)

    def test_teacher_targets_receive_no_gradient(self):
        heads = self._heads()
        g = torch.Generator().manual_seed(9)
        z_mri_s = torch.randn(16, generator=g, requires_grad=True)
        z_pet_s = torch.randn(16, generator=g, requires_grad=True)
        z_mri_t = torch.randn(16, generator=g, requires_grad=True)
        z_pet_t = torch.randn(16, generator=g, requires_grad=True)
        loss = rcmd_loss(z_mri_s, z_pet_s, z_mri_t, z_pet_t, heads)
        loss.backward()
        assert z_mri_t.grad is None or torch.all(z_mri_t.grad == 0)
        assert z_pet_t.grad is None or torch.all(z_pet_t.grad == 0)
        assert z_mri_s.grad is not None and z_mri_s.grad.abs().sum() > 0


class TestTotalLoss:
    def test_unpaired_drops_distillation(self):
        l_mae = torch.tensor(1.0)
        assert float(total_loss(l_mae, torch.tensor(0.7), paired=False, lam=0.1)) == 1.0

    def test_paired_arithmetic(self):
        out = total_loss(torch.tensor(1.0), torch.tensor(0.5), paired=True, lam=0.1)
        assert float(out) == pytest.approx(1.05, abs=1e-9)

    def test_lambda_zero(self):
        out = total_loss(torch.tensor(2.0), torch.tensor(1.5), paired=True, lam=0.0)
        assert float(out) == 2.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(DataError):
            total_loss(torch.tensor(1.0), torch.tensor(1.0), paired=True, lam=-0.1)
