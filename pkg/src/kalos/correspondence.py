"""Cross-rater correspondence: sparse candidate costs and constrained
clustering solvers that group annotations into disjoint per-image units.

Every unit holds at most one annotation per rater (cycle consistency) and
the unit sets always partition the image's annotations; singletons are
valid units. Tie-breaking is purely content-based, which makes the greedy
solver exactly permutation stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import Annotation
from .distances import distance
from .geometry import canonical_key

COST_FUNCTIONS = ("soft", "neg")
SOLVERS = ("greedy", "shm", "ahc")

_BIG = 1e9


class SolverError(ValueError):
    pass


def pair_cost(d_loc: float, d_cls: int, cost: str) -> float:
    """Matching cost; lower (more negative) is a stronger match.

    ``soft`` rewards spatial overlap and adds a unit bonus for agreeing
    categories; ``neg`` ignores the category entirely.
    """
    if cost == "soft":
        base = -(1.0 - d_loc)
        return base - 1.0 if d_cls == 0 else base
    if cost == "neg":
        return -d_loc
    raise SolverError(f"unknown cost function {cost!r}; expected one of {COST_FUNCTIONS}")


@dataclass(frozen=True)
class CandidatePair:
    ann_a: str
    ann_b: str
    d_loc: float
    d_cls: int
    cost: float


@dataclass(frozen=True)
class UnitSet:
    image_id: str
    units: tuple[frozenset[str], ...]


def _ann_sort_key(ann: Annotation) -> tuple:
    return (canonical_key(ann.geometry), ann.category_id, ann.rater_id, ann.id)


def _pair_sort_key(pair: CandidatePair, index: dict[str, Annotation]) -> tuple:
    a, b = index[pair.ann_a], index[pair.ann_b]
    if _ann_sort_key(a) > _ann_sort_key(b):
        a, b = b, a
    return (
        pair.cost,
        pair.d_loc,
        canonical_key(a.geometry),
        canonical_key(b.geometry),
        a.category_id,
        b.category_id,
        a.id,
        b.id,
    )


def build_candidates(annotations, metric: str, tau: float, cost: str = "soft") -> list[CandidatePair]:
    """All cross-rater pairs with d_loc <= tau, in deterministic order."""
    if not 0.0 < tau <= 1.0:
        raise SolverError(f"tau must be in (0, 1], got {tau}")
    anns = sorted(annotations, key=_ann_sort_key)
    index = {a.id: a for a in anns}
    pairs: list[CandidatePair] = []
    for i, a in enumerate(anns):
        for b in anns[i + 1:]:
            if a.rater_id == b.rater_id:
                continue
            d_loc = distance(a.geometry, b.geometry, metric)
            if d_loc > tau:
                continue
            d_cls = 0 if a.category_id == b.category_id else 1
            pairs.append(CandidatePair(ann_a=a.id, ann_b=b.id, d_loc=d_loc, d_cls=d_cls,
                                       cost=pair_cost(d_loc, d_cls, cost)))
    pairs.sort(key=lambda p: _pair_sort_key(p, index))
    return pairs


def _finish_units(image_id: str, clusters: list[set[str]], annotations) -> UnitSet:
    covered = set().union(*clusters) if clusters else set()
    units = [frozenset(c) for c in clusters]
    for ann in annotations:
        if ann.id not in covered:
            units.append(frozenset([ann.id]))
    units.sort(key=lambda u: tuple(sorted(u)))
    return UnitSet(image_id=image_id, units=tuple(units))


def _image_id_of(annotations) -> str:
    ids = {a.image_id for a in annotations}
    if len(ids) > 1:
        raise SolverError(f"annotations span multiple images: {sorted(ids)}")
    return next(iter(ids)) if ids else ""


def solve_greedy(pairs: list[CandidatePair], annotations) -> UnitSet:
    """Accept pairs in ascending cost order when the merged cluster keeps at
    most one annotation per rater."""
    annotations = list(annotations)
    image_id = _image_id_of(annotations)
    rater_of = {a.id: a.rater_id for a in annotations}
    cluster_of: dict[str, int] = {}
    members: dict[int, set[str]] = {}
    raters: dict[int, set[str]] = {}
    next_id = 0
    for pair in pairs:
        for ann_id in (pair.ann_a, pair.ann_b):
            if ann_id not in cluster_of:
                cluster_of[ann_id] = next_id
                members[next_id] = {ann_id}
                raters[next_id] = {rater_of[ann_id]}
                next_id += 1
        ca, cb = cluster_of[pair.ann_a], cluster_of[pair.ann_b]
        if ca == cb:
            continue
        if raters[ca] & raters[cb]:
            continue
        for ann_id in members[cb]:
            cluster_of[ann_id] = ca
        members[ca] |= members.pop(cb)
        raters[ca] |= raters.pop(cb)
    return _finish_units(image_id, list(members.values()), annotations)


def solve_shm(annotations, metric: str, tau: float, cost: str = "soft") -> UnitSet:
    """Sequential assignment: raters in canonical (sorted id) order, each new
    rater's annotations matched to existing units by an optimal assignment on
    the unit-mean cost; a unit is admissible when its mean d_loc <= tau."""
    annotations = list(annotations)
    image_id = _image_id_of(annotations)
    by_rater: dict[str, list[Annotation]] = {}
    for ann in sorted(annotations, key=_ann_sort_key):
        by_rater.setdefault(ann.rater_id, []).append(ann)
    index = {a.id: a for a in annotations}
    units: list[list[str]] = []
    for rater in sorted(by_rater):
        anns = by_rater[rater]
        if not units:
            units.extend([a.id] for a in anns)
            continue
        matrix = np.full((len(units), len(anns)), _BIG)
        for ui, unit in enumerate(units):
            for ai, ann in enumerate(anns):
                ds, cs = [], []
                for member_id in unit:
                    member = index[member_id]
                    d = distance(member.geometry, ann.geometry, metric)
                    ds.append(d)
                    cs.append(pair_cost(d, 0 if member.category_id == ann.category_id else 1, cost))
                if float(np.mean(ds)) <= tau:
                    matrix[ui, ai] = float(np.mean(cs))
        rows, cols = linear_sum_assignment(matrix)
        matched_cols = set()
        for r, c in zip(rows, cols):
            if matrix[r, c] < _BIG / 2:
                units[r].append(anns[c].id)
                matched_cols.add(c)
        for ai, ann in enumerate(anns):
            if ai not in matched_cols:
                units.append([ann.id])
    return _finish_units(image_id, [set(u) for u in units], annotations)


def solve_ahc(pairs: list[CandidatePair], annotations, metric: str, tau: float,
              cost: str = "soft") -> UnitSet:
    """Average-linkage agglomeration over the candidate graph.

    Agglomeration itself is uncontrolled: clusters connected by candidate
    edges merge lowest-average-edge-cost first while the average linked
    distance stays within tau, without watching rater uniqueness. Chains of
    plausible pairs can therefore pull several true instances into one
    blob (merge propagation); the one-per-rater unit invariant is restored
    afterwards by deterministically splitting violating clusters.
    """
    del metric, cost
    annotations = sorted(annotations, key=_ann_sort_key)
    image_id = _image_id_of(annotations)
    index = {a.id: a for a in annotations}
    edge: dict[tuple[str, str], tuple[float, float]] = {}
    for p in pairs:
        key = (min(p.ann_a, p.ann_b), max(p.ann_a, p.ann_b))
        edge[key] = (p.cost, p.d_loc)
    clusters: list[set[str]] = [{a.id} for a in annotations]

    while True:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                cs, ds = [], []
                for a_id in clusters[i]:
                    for b_id in clusters[j]:
                        e = edge.get((min(a_id, b_id), max(a_id, b_id)))
                        if e is not None:
                            cs.append(e[0])
                            ds.append(e[1])
                if not cs or float(np.mean(ds)) > tau:
                    continue
                score = (float(np.mean(cs)), tuple(sorted(clusters[i] | clusters[j])))
                if best is None or score < best[0]:
                    best = (score, i, j)
        if best is None:
            break
        _, i, j = best
        clusters[i] |= clusters[j]
        del clusters[j]

    # Post-hoc constraint repair: a cluster holding several annotations from
    # one rater cannot attribute its members to instances, so it scatters
    # into singletons. Propagated merges therefore cost recall.
    repaired: list[set[str]] = []
    for cluster in clusters:
        if len({index[m].rater_id for m in cluster}) == len(cluster):
            repaired.append(cluster)
        else:
            repaired.extend({member} for member in cluster)
    return _finish_units(image_id, repaired, annotations)


def solve_image(annotations, metric: str, tau: float, cost: str = "soft",
                solver: str = "greedy") -> UnitSet:
    """Dispatch to the configured solver and post-check the unit invariants."""
    annotations = list(annotations)
    if solver == "greedy":
        units = solve_greedy(build_candidates(annotations, metric, tau, cost), annotations)
    elif solver == "shm":
        units = solve_shm(annotations, metric, tau, cost)
    elif solver == "ahc":
        units = solve_ahc(build_candidates(annotations, metric, tau, cost), annotations, metric, tau, cost)
    else:
        raise SolverError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    assert_valid_units(units, annotations)
    return units


def assert_valid_units(units: UnitSet, annotations) -> None:
    """Disjoint cover with at most one annotation per rater per unit."""
    annotations = list(annotations)
    all_ids = {a.id for a in annotations}
    rater_of = {a.id: a.rater_id for a in annotations}
    seen: set[str] = set()
    for unit in units.units:
        if seen & unit:
            raise SolverError("units are not disjoint")
        seen |= unit
        unit_raters = [rater_of[m] for m in unit]
        if len(unit_raters) != len(set(unit_raters)):
            raise SolverError("unit holds more than one annotation from the same rater")
    if seen != all_ids:
        raise SolverError("units do not cover the image annotations exactly")
