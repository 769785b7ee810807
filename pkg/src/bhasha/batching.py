"""Strategic batch formation for graph construction.

Anchor/neighbor groups are built by maximum token overlap with alternating
anchor languages; 70% of batches per epoch follow this strategic formation and
the rest draw an equal language split at random. Every emitted batch holds
exactly B/2 instances per language. High-resource instances are consumed
without repetition until their pool is exhausted; the small low-resource pool
recycles with reshuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Instance, SPECIAL_IDS
from .errors import ContractError, PlanningError


def token_overlap(a: Instance, b: Instance, multiplicity: bool = False) -> int:
    """Number of shared token ids (set semantics by default), specials excluded."""
    if a.token_ids is None or b.token_ids is None:
        raise ContractError("token_overlap requires encoded instances")
    sa = set(a.token_ids) - SPECIAL_IDS
    sb = set(b.token_ids) - SPECIAL_IDS
    if not multiplicity:
        return len(sa & sb)
    from collections import Counter
    ca, cb = Counter(t for t in a.token_ids if t not in SPECIAL_IDS), \
        Counter(t for t in b.token_ids if t not in SPECIAL_IDS)
    return sum(min(ca[t], cb[t]) for t in ca.keys() & cb.keys())


@dataclass
class AnchorRecord:
    anchor_id: str
    neighbor_ids: list = field(default_factory=list)


@dataclass
class BatchPlan:
    ids: list                      # ordered instance ids
    languages: list                # aligned language tags
    kind: str                      # "strategic" | "random"
    anchors: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise PlanningError("duplicate instance ids within a batch")
        if len(self.ids) != len(self.languages):
            raise PlanningError("ids/languages length mismatch")


@dataclass
class EpochPlan:
    batches: list
    seed: int
    strategic_fraction: float


class _Pool:
    """Ordered pool of instances with deterministic removal and recycling."""

    def __init__(self, instances, rng: np.random.Generator, recycle: bool):
        self.all = list(instances)
        self.rng = rng
        self.recycle = recycle
        self.available = list(range(len(self.all)))
        self._in_batch: set[int] = set()

    def __len__(self):
        return len(self.available)

    def begin_batch(self):
        self._in_batch = set()

    def _refill(self, need: int):
        if not self.recycle:
            raise PlanningError(
                "pool exhausted; enable low-resource recycling or shrink the batch size")
        if not self.all:
            raise PlanningError("cannot draw from an empty pool")
        fresh = list(range(len(self.all)))
        self.rng.shuffle(fresh)
        blocked = set(self.available) | self._in_batch
        self.available.extend(i for i in fresh if i not in blocked)
        if len(self.available) < need:
            raise PlanningError(
                f"pool of {len(self.all)} cannot fill a request for {need} distinct instances")

    def draw_random(self, k: int):
        self._ensure(k)
        idx = self.rng.choice(len(self.available), size=k, replace=False)
        chosen = [self.available[i] for i in sorted(idx)]
        self._remove(chosen)
        return [self.all[i] for i in chosen]

    def draw_one_random(self):
        return self.draw_random(1)[0]

    def draw_best_overlap(self, anchor: Instance, k: int):
        """Greedy top-k by overlap with the anchor; ties break on lowest id."""
        self._ensure(k)
        scored = sorted(
            self.available,
            key=lambda i: (-token_overlap(anchor, self.all[i]), self.all[i].id),
        )
        chosen = scored[:k]
        self._remove(chosen)
        return [self.all[i] for i in chosen]

    def _ensure(self, k: int):
        if len(self.available) < k:
            self._refill(k)

    def _remove(self, indices):
        drop = set(indices)
        self._in_batch |= drop
        self.available = [i for i in self.available if i not in drop]


def form_strategic_batch(lrl_pool: _Pool, hrl_pool: _Pool, B: int, n: int,
                         start_language: str = "LRL") -> BatchPlan:
    """Fill one batch with alternating-language anchor groups.

    Each group = anchor + (n/2 - 1) same-language neighbors + n/2
    other-language neighbors, all chosen by maximum token overlap with the
    anchor. Selected instances leave the pools. The final batch is balanced
    at exactly B/2 per language.
    """
    if B % 2 or n % 2:
        raise PlanningError("B and n must both be even")
    if n > B:
        raise PlanningError("group size n cannot exceed batch size B")
    quota = {"LRL": B // 2, "HRL": B // 2}
    members: list[Instance] = []
    anchors: list[AnchorRecord] = []
    lang = start_language
    pools = {"LRL": lrl_pool, "HRL": hrl_pool}
    while quota["LRL"] + quota["HRL"] > 0:
        other = "HRL" if lang == "LRL" else "LRL"
        same_n = min(n // 2, quota[lang])
        other_n = min(n // 2, quota[other])
        if same_n == 0:
            lang = other
            continue
        anchor = pools[lang].draw_one_random()
        group = [anchor]
        group += pools[lang].draw_best_overlap(anchor, same_n - 1)
        group += pools[other].draw_best_overlap(anchor, other_n)
        quota[lang] -= same_n
        quota[other] -= other_n
        members.extend(group)
        anchors.append(AnchorRecord(anchor_id=anchor.id,
                                    neighbor_ids=[m.id for m in group[1:]]))
        lang = other
    return BatchPlan(ids=[m.id for m in members],
                     languages=[m.language for m in members],
                     kind="strategic", anchors=anchors)


def form_random_batch(lrl_pool: _Pool, hrl_pool: _Pool, B: int) -> BatchPlan:
    if B % 2:
        raise PlanningError("B must be even")
    members = lrl_pool.draw_random(B // 2) + hrl_pool.draw_random(B // 2)
    return BatchPlan(ids=[m.id for m in members],
                     languages=[m.language for m in members],
                     kind="random")


def plan_epoch(lrl_train, hrl_train, B: int, n: int, seed: int,
               strategic_fraction: float = 0.7,
               num_batches: int | None = None) -> EpochPlan:
    """Deterministic per-seed epoch plan.

    ``num_batches`` defaults to one pass over the high-resource pool
    (floor(|HRL| / (B/2))). Exactly ``round(strategic_fraction * count)``
    batches are strategic; their positions come from a seeded shuffle.
    """
    if not (0.0 <= strategic_fraction <= 1.0):
        raise ContractError("strategic_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    if num_batches is None:
        num_batches = max(1, len(hrl_train) // (B // 2))
    lrl_pool = _Pool(lrl_train, rng, recycle=True)
    hrl_pool = _Pool(hrl_train, rng, recycle=True)

    n_strategic = int(round(strategic_fraction * num_batches))
    kinds = ["strategic"] * n_strategic + ["random"] * (num_batches - n_strategic)
    order = np.arange(num_batches)
    rng.shuffle(order)
    kinds = [kinds[i] for i in order]

    batches = []
    start = "LRL"
    for kind in kinds:
        lrl_pool.begin_batch()
        hrl_pool.begin_batch()
        if kind == "strategic":
            batches.append(form_strategic_batch(lrl_pool, hrl_pool, B, n, start_language=start))
            start = "HRL" if start == "LRL" else "LRL"
        else:
            batches.append(form_random_batch(lrl_pool, hrl_pool, B))
    return EpochPlan(batches=batches, seed=seed, strategic_fraction=strategic_fraction)


def inference_neighborhood(test_instance: Instance, lrl_train, hrl_train,
                           B: int, n: int, seed: int = 0) -> BatchPlan:
    """Batch plan for one test instance: the instance anchors the first group
    and the remaining slots are filled from *training* data by token overlap.
    Pools are copied per call, so evaluations never influence one another.
    """
    if B % 2 or n % 2:
        raise PlanningError("B and n must both be even")
    rng = np.random.default_rng(seed)
    pools = {"LRL": _Pool(lrl_train, rng, recycle=True),
             "HRL": _Pool(hrl_train, rng, recycle=True)}
    lang = test_instance.language
    other = "HRL" if lang == "LRL" else "LRL"
    quota = {lang: B // 2 - 1, other: B // 2}

    members = [test_instance]
    same_n = min(n // 2 - 1, quota[lang])
    other_n = min(n // 2, quota[other])
    group = pools[lang].draw_best_overlap(test_instance, same_n)
    group += pools[other].draw_best_overlap(test_instance, other_n)
    quota[lang] -= same_n
    quota[other] -= other_n
    members.extend(group)
    anchors = [AnchorRecord(anchor_id=test_instance.id, neighbor_ids=[m.id for m in group])]

    cur = other
    while quota[lang] + quota[other] > 0:
        nxt = "HRL" if cur == "LRL" else "LRL"
        same_n = min(n // 2, quota[cur])
        if same_n == 0:
            cur = nxt
            continue
        anchor = pools[cur].draw_one_random()
        grp = [anchor] + pools[cur].draw_best_overlap(anchor, same_n - 1)
        other_n = min(n // 2, quota[nxt])
        grp += pools[nxt].draw_best_overlap(anchor, other_n)
        quota[cur] -= same_n
        quota[nxt] -= other_n
        members.extend(grp)
        anchors.append(AnchorRecord(anchor_id=anchor.id, neighbor_ids=[m.id for m in grp[1:]]))
        cur = nxt
    return BatchPlan(ids=[m.id for m in members],
                     languages=[m.language for m in members],
                     kind="strategic", anchors=anchors)


def dump_plan(plan: EpochPlan, path):
    with open(path, "w", encoding="utf-8") as fh:
        for k, batch in enumerate(plan.batches):
            anchor = batch.anchors[0].anchor_id if batch.anchors else "-"
            fh.write(f"{k} {batch.kind} {anchor} {' '.join(batch.ids)}\n")
