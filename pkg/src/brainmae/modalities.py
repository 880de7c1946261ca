"""Imaging modalities and modality-subset sampling.

The system knows exactly four modalities with a fixed canonical order:
T1 < T2 < FLAIR < PET. Modality sets are represented as tuples in that
order so they hash, compare and serialize stably.
"""

from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

T1 = "T1"
T2 = "T2"
FLAIR = "FLAIR"
PET = "PET"

MODALITIES: tuple[str, ...] = (T1, T2, FLAIR, PET)
MRI_MODALITIES: tuple[str, ...] = (T1, T2, FLAIR)
N_MODALITIES = len(MODALITIES)

_ORDER = {m: i for i, m in enumerate(MODALITIES)}

# The five clinically common combinations eligible for test reporting,
# in escalation order (T1 first, full workup last).
DESIGNATED_COMBINATIONS: tuple[tuple[str, ...], ...] = (
    (T1,),
    (T1, FLAIR),
    (T1, T2, FLAIR),
    (T1, FLAIR, PET),
    (T1, T2, FLAIR, PET),
)


def modality_index(m: str) -> int:
    if m not in _ORDER:
        raise DataError(f"unknown modality {m!r}")
    return _ORDER[m]


def canonical(mods: Iterable[str]) -> tuple[str, ...]:
    """Return the modalities as a deduplicated tuple in canonical order."""
    unique = set(mods)
    for m in unique:
        if m not in _ORDER:
            raise DataError(f"unknown modality {m!r}")
    return tuple(m for m in MODALITIES if m in unique)


def combination_tag(mods: Iterable[str]) -> str:
    """Canonical string tag for a modality set, e.g. ``"T1+FLAIR"``."""
    return "+".join(canonical(mods))


def parse_combination_tag(tag: str) -> tuple[str, ...]:
    return canonical(tag.split("+"))


def sample_modality_subset(
    observed: Sequence[str], rng: np.random.Generator
) -> tuple[str, ...]:
    """Draw a uniformly random nonempty subset of ``observed``.

    Pretraining-time availability augmentation: the model should see every
    sub-combination of what a subject actually has.
    """
    obs = canonical(observed)
    if not obs:
        raise DataError("observed modality set is empty")
    pick = int(rng.integers(1, 2 ** len(obs)))
    return tuple(m for i, m in enumerate(obs) if pick >> i & 1)


def modality_dropout(
    observed: Sequence[str], rate: float, rng: np.random.Generator
) -> tuple[str, ...]:
    """Independently drop each observed modality with probability ``rate``.

    If everything is dropped, one uniformly chosen original modality is
    restored, so the result is always nonempty.
    """
    obs = canonical(observed)
    if not obs:
        raise DataError("observed modality set is empty")
    keep = [m for m in obs if rng.random() >= rate]
    if not keep:
        keep = [obs[int(rng.integers(len(obs)))]]
    return canonical(keep)
