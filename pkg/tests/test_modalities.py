from collections import Counter

import pytest

from brainmae.errors import DataError
from brainmae.modalities import (
    DESIGNATED_COMBINATIONS,
    MODALITIES,
    canonical,
    combination_tag,
    modality_dropout,
    parse_combination_tag,
    sample_modality_subset,
)
from brainmae.rng import substream


def test_canonical_order_fixed():
    assert MODALITIES == ("T1", "T2", "FLAIR", "PET")
    assert canonical(["PET", "T1", "FLAIR"]) == ("T1", "FLAIR", "PET")
    assert canonical(["T1", "T1"]) == ("T1",)


def test_unknown_modality_rejected():
    with pytest.raises(DataError):
        canonical(["T1", "CT"])


def test_combination_tags_roundtrip():
    for combo in DESIGNATED_COMBINATIONS:
        assert parse_combination_tag(combination_tag(combo)) == combo


class TestSubsetSampling:
    def test_singleton_always_returned(self):
        rng = substream(0, "s")
        for _ in range(50):
            assert sample_modality_subset(("T1",), rng) == ("T1",)

    def test_uniform_over_nonempty_subsets(self):
        rng = substream(0, "mc")
        counts = Counter()
        n = 10_000
        for _ in range(n):
            counts[sample_modality_subset(("T1", "PET"), rng)] += 1
        assert set(counts) == {("T1",), ("PET",), ("T1", "PET")}
        for subset, c in counts.items():
            assert abs(c / n - 1 / 3) < 0.02, subset

    def test_subset_of_observed(self):
        rng = substream(1, "sub")
        for _ in range(200):
            out = sample_modality_subset(("T1", "FLAIR", "PET"), rng)
            assert set(out) <= {"T1", "FLAIR", "PET"}
            assert out

    def test_empty_observed_rejected(self):
        with pytest.raises(DataError):
            sample_modality_subset((), substream(0, "e"))


class TestModalityDropout:
    def test_rate_zero_is_identity(self):
        rng = substream(2, "d0")
        for _ in range(20):
            assert modality_dropout(MODALITIES, 0.0, rng) == MODALITIES

    def test_rate_one_keeps_one_uniformly(self):
        rng = substream(3, "d1")
        counts = Counter()
        n = 10_000
        for _ in range(n):
            kept = modality_dropout(("T1", "T2", "FLAIR"), 1.0, rng)
            assert len(kept) == 1
            counts[kept[0]] += 1
        for m in ("T1", "T2", "FLAIR"):
            assert abs(counts[m] / n - 1 / 3) < 0.02

    def test_result_subset_and_nonempty(self):
        rng = substream(4, "dsub")
        for _ in range(300):
            out = modality_dropout(("T1", "PET"), 0.7, rng)
            assert out
            assert set(out) <= {"T1", "PET"}
