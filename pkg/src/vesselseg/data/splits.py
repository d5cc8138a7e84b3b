"""Patient-disjoint dataset partitioning.

Images are grouped by patient; patients are shuffled by seed and assigned
greedily so image-count fractions track the requested ratios. All images of a
patient land in one partition, and k-fold test folds are patient-disjoint with
near-equal image counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SplitError


@dataclass
class SplitPlan:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    fold: int | None = None

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test


def _group_by_patient(items) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for sample_id, patient_id in items:
        groups.setdefault(patient_id, []).append(sample_id)
    return groups


def _greedy_assign(patients, groups, ratios, rng) -> list[list[str]]:
    """Assign shuffled patients to the bucket with the largest image deficit."""
    total = sum(len(groups[p]) for p in patients)
    targets = [r * total for r in ratios]
    order = [patients[i] for i in rng.permutation(len(patients))]
    counts = [0.0] * len(ratios)
    buckets: list[list[str]] = [[] for _ in ratios]
    for p in order:
        deficits = [t - c for t, c in zip(targets, counts)]
        j = int(np.argmax(deficits))  # ties go to the earliest bucket
        buckets[j].extend(groups[p])
        counts[j] += len(groups[p])
    return buckets


def split(items, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitPlan:
    """Partition (sample_id, patient_id) pairs into train/val/test."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    groups = _group_by_patient(items)
    if len(groups) < 3:
        raise SplitError(f"need at least 3 patients to split, got {len(groups)}")
    rng = np.random.default_rng(seed)
    train, val, test = _greedy_assign(list(groups), groups, ratios, rng)
    return SplitPlan(train=train, val=val, test=test, seed=seed)


def kfold(items, k: int = 10, seed: int = 0) -> list[SplitPlan]:
    """k patient-disjoint folds; fold j is test, the rest splits train:val 7:1."""
    groups = _group_by_patient(items)
    if len(groups) < k:
        raise SplitError(f"need at least k={k} patients, got {len(groups)}")
    if k < 2:
        raise SplitError("k must be >= 2")
    rng = np.random.default_rng(seed)
    patients = list(groups)
    order = [patients[i] for i in rng.permutation(len(patients))]
    fold_patients: list[list[str]] = [[] for _ in range(k)]
    fold_counts = [0] * k
    for p in order:
        j = int(np.argmin(fold_counts))
        fold_patients[j].append(p)
        fold_counts[j] += len(groups[p])

    plans = []
    for j in range(k):
        test_ids = [sid for p in fold_patients[j] for sid in groups[p]]
        rest = [(sid, p) for jj in range(k) if jj != j
                for p in fold_patients[jj] for sid in groups[p]]
        rest_groups = _group_by_patient(rest)
        sub_rng = np.random.default_rng([seed, j])
        train, val = _greedy_assign(list(rest_groups), rest_groups,
                                    (7 / 8, 1 / 8), sub_rng)
        plans.append(SplitPlan(train=train, val=val, test=test_ids,
                               seed=seed, fold=j))
    return plans
