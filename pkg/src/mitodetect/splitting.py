"""Stratified hold-out and slide-grouped stratified K-fold splitting."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import DatasetManifest, PatchRecord

STRAT_KEYS = ("tissue_domain", "class_label")
GROUP_KEYS = ("slide_id", "none")


class SplitError(ValueError):
    pass


def _stratum(rec: PatchRecord, strat_key: str):
    if strat_key == "tissue_domain":
        return rec.domain_id
    if strat_key == "class_label":
        return int(rec.is_positive)
    raise SplitError(f"unknown strat_key {strat_key!r}; expected one of {STRAT_KEYS}")


def _group(rec: PatchRecord, group_key: str) -> str:
    if group_key == "slide_id":
        return rec.slide_id
    if group_key == "none":
        return rec.patch_id
    raise SplitError(f"unknown group_key {group_key!r}; expected one of {GROUP_KEYS}")


@dataclass
class FoldPlan:
    test_ids: set[str]
    folds: list[tuple[set[str], set[str]]]
    k: int
    strat_key: str
    group_key: str
    seed: int
    meta: dict = field(default_factory=dict)

    def check(self, manifest: DatasetManifest | None = None) -> None:
        """Assert every structural invariant; raises ``SplitError`` on violation."""
        if len(self.folds) != self.k:
            raise SplitError(f"plan has {len(self.folds)} folds, expected {self.k}")
        all_ids = self.folds[0][0] | self.folds[0][1] if self.folds else set()
        if all_ids & self.test_ids:
            raise SplitError("test ids overlap fold ids")
        seen_val: Counter = Counter()
        for i, (train, val) in enumerate(self.folds):
            if train & val:
                raise SplitError(f"fold {i}: train and val overlap")
            if train | val != all_ids:
                raise SplitError(f"fold {i}: train+val does not cover the non-test ids")
            seen_val.update(val)
        if set(seen_val) != all_ids or any(c != 1 for c in seen_val.values()):
            raise SplitError("val sets do not partition the non-test ids")
        if manifest is not None and self.group_key == "slide_id":
            slide = {r.patch_id: r.slide_id for r in manifest}
            for i, (train, val) in enumerate(self.folds):
                leak = {slide[p] for p in train} & {slide[p] for p in val}
                if leak:
                    raise SplitError(f"fold {i}: slides in both train and val: {sorted(leak)}")

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "strat_key": self.strat_key,
            "group_key": self.group_key,
            "seed": self.seed,
            "meta": self.meta,
            "test_ids": sorted(self.test_ids),
            "folds": [
                {"fold": i, "train_ids": sorted(tr), "val_ids": sorted(va)}
                for i, (tr, va) in enumerate(self.folds)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FoldPlan":
        folds = [(set(f["train_ids"]), set(f["val_ids"])) for f in sorted(d["folds"], key=lambda f: f["fold"])]
        return cls(set(d["test_ids"]), folds, d["k"], d["strat_key"], d["group_key"], d["seed"], d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def stratified_holdout(
    manifest: DatasetManifest | list[PatchRecord],
    test_fraction: float,
    strat_key: str = "tissue_domain",
    seed: int = 0,
) -> tuple[set[str], set[str]]:
    """Split ids into ``(train_ids, test_ids)`` with per-stratum proportions.

    The overall test count is ``round(test_fraction * N)``, distributed over
    strata by largest remainder (ties broken by seeded shuffle), with at least
    one test record per stratum.
    """
    if not 0 < test_fraction < 0.5:
        raise SplitError(f"test_fraction must be in (0, 0.5), got {test_fraction}")
    records = list(manifest)
    rng = np.random.default_rng(seed)
    strata: dict = defaultdict(list)
    for rec in records:
        strata[_stratum(rec, strat_key)].append(rec.patch_id)
    for s, ids in strata.items():
        if len(ids) < 2:
            raise SplitError(f"stratum {s!r} has {len(ids)} record(s); need >= 2 to split")

    keys = sorted(strata)
    exact = {s: test_fraction * len(strata[s]) for s in keys}
    alloc = {s: max(1, math.floor(exact[s])) for s in keys}
    budget = round(test_fraction * len(records)) - sum(alloc.values())
    tiebreak = dict(zip(keys, rng.permutation(len(keys))))
    for s in sorted(keys, key=lambda s: (-(exact[s] - math.floor(exact[s])), tiebreak[s])):
        if budget <= 0:
            break
        if alloc[s] < len(strata[s]) - 1 and exact[s] - alloc[s] > -1 + 1e-12:
            alloc[s] += 1
            budget -= 1

    test: set[str] = set()
    for s in keys:
        ids = sorted(strata[s])
        pick = rng.permutation(len(ids))[: alloc[s]]
        test.update(ids[i] for i in pick)
    train = {r.patch_id for r in records} - test
    return train, test


def _assign_groups(
    groups: dict[str, list[PatchRecord]],
    k: int,
    strat_key: str,
    rng: np.random.Generator,
) -> list[list[str]]:
    """Greedy bin packing of groups into ``k`` folds balancing strata."""
    classes = sorted({_stratum(r, strat_key) for recs in groups.values() for r in recs})
    cidx = {c: i for i, c in enumerate(classes)}
    counts = {}
    for g, recs in groups.items():
        v = np.zeros(len(classes))
        for r in recs:
            v[cidx[_stratum(r, strat_key)]] += 1
        counts[g] = v
    totals = sum(counts.values())
    # rarest stratum first: for binary labels this is the positive count
    rarity = np.argsort(totals, kind="stable")
    target = totals / k

    names = sorted(groups)
    shuffled = [names[i] for i in rng.permutation(len(names))]
    ordered = sorted(shuffled, key=lambda g: (tuple(-counts[g][rarity]), -counts[g].sum()))

    fold_counts = np.zeros((k, len(classes)))
    members: list[list[str]] = [[] for _ in range(k)]
    for g in ordered:
        c = counts[g]
        # deficit in the strata this group carries, weighted by its composition
        deficit = ((target[None, :] - fold_counts) * c[None, :]).sum(axis=1)
        sizes = fold_counts.sum(axis=1)
        f = min(range(k), key=lambda i: (-deficit[i], sizes[i], i))
        fold_counts[f] += c
        members[f].append(g)
    return members


def stratified_group_kfold(
    manifest: DatasetManifest | list[PatchRecord],
    k: int = 5,
    strat_key: str = "class_label",
    group_key: str = "slide_id",
    seed: int = 0,
    test_ids: set[str] | None = None,
) -> FoldPlan:
    """K-fold plan where whole groups land in a single validation fold.

    Records listed in ``test_ids`` are excluded from every fold.
    """
    test_ids = set(test_ids or ())
    records = [r for r in manifest if r.patch_id not in test_ids]
    groups: dict[str, list[PatchRecord]] = defaultdict(list)
    for r in records:
        groups[_group(r, group_key)].append(r)
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if len(groups) < k:
        raise SplitError(f"only {len(groups)} distinct groups for k={k} folds")

    rng = np.random.default_rng(seed)
    members = _assign_groups(groups, k, strat_key, rng)
    all_ids = {r.patch_id for r in records}
    folds = []
    for fold_groups in members:
        val = {r.patch_id for g in fold_groups for r in groups[g]}
        folds.append((all_ids - val, val))
    plan = FoldPlan(test_ids, folds, k, strat_key, group_key, seed)
    plan.check()
    return plan


def make_fold_plan(
    manifest: DatasetManifest,
    k: int = 5,
    test_fraction: float = 0.1,
    strat_key: str = "tissue_domain",
    group_key: str = "none",
    seed: int = 0,
) -> FoldPlan:
    """Hold out a stratified test set, then K-fold the remainder."""
    _, test = stratified_holdout(manifest, test_fraction, strat_key, seed)
    plan = stratified_group_kfold(manifest, k, strat_key, group_key, seed, test_ids=test)
    plan.meta["test_fraction"] = test_fraction
    plan.check(manifest)
    return plan
