"""Patient-level dataset splitting."""

from __future__ import annotations

import math

import numpy as np

from xdssl.data.records import SPLITS, Manifest
from xdssl.errors import ConfigError


def apportion(n: int, fractions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` items.

    Ties in the fractional remainder go to the split listed later, so
    ``(0.68, 0.16, 0.16)`` over 109 patients gives 74/17/18.
    """
    names = list(fractions)
    quotas = [n * fractions[k] for k in names]
    counts = [math.floor(q + 1e-9) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = n - sum(counts)
    order = sorted(range(len(names)), key=lambda i: (-round(remainders[i], 9), -i))
    for i in order[:leftover]:
        counts[i] += 1
    return dict(zip(names, counts))


def patient_split(manifest: Manifest, fractions: dict[str, float], seed: int) -> Manifest:
    """Assign every patient to exactly one split.

    The assignment depends only on the set of patient ids, the fractions and
    the seed: ids are sorted, permuted by a seeded generator and cut into
    consecutive blocks whose sizes come from :func:`apportion`.
    """
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown split names {sorted(unknown)}")
    if any(f < 0 for f in fractions.values()):
        raise ConfigError("split fractions must be non-negative")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions.values())}, expected 1")
    requested = {k: v for k, v in fractions.items() if v > 0}
    patients = manifest.patients
    if len(patients) < len(requested):
        raise ConfigError(f"{len(patients)} patients cannot fill {len(requested)} splits")

    counts = apportion(len(patients), requested)
    # every requested split gets at least one patient
    for name in requested:
        while counts[name] == 0:
            donor = max(counts, key=lambda k: counts[k])
            counts[donor] -= 1
            counts[name] += 1

    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    assignment: dict[str, str] = {}
    start = 0
    for name in requested:
        for pid in shuffled[start : start + counts[name]]:
            assignment[pid] = name
        start += counts[name]
    return manifest.with_assignment(assignment)
