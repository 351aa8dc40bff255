"""Solver-validation harness: clustering accuracy against generator ground
truth, failure taxonomy, permutation stability and factorial sweeps over
noise magnitude, rater count and collaboration clusters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .correspondence import UnitSet
from .dataset import Dataset
from .noise.generation import SynthesisResult, generate, generate_collaboration
from .noise.model import NoiseModel
from .pipeline import PipelineConfig, score_dataset, solve_units


@dataclass(frozen=True)
class PairOutcome:
    kind: str  # tp | fp | missed | cuckoo
    ann_a: str
    ann_b: str


@dataclass
class PairMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    missed: int
    cuckoo: int
    outcomes: list[PairOutcome] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "missed": self.missed, "cuckoo": self.cuckoo}


def _cross_rater_pairs(d: Dataset, image_id: str) -> list[tuple[str, str]]:
    anns = sorted(d.annotations_by_image.get(image_id, ()), key=lambda a: a.id)
    pairs = []
    for i, a in enumerate(anns):
        for b in anns[i + 1:]:
            if a.rater_id != b.rater_id:
                pairs.append((a.id, b.id))
    return pairs


def _truth_same(correspondence: dict[str, tuple[str, ...]], a: str, b: str) -> bool:
    return bool(set(correspondence.get(a, ())) & set(correspondence.get(b, ())))


def _covered(correspondence: dict[str, tuple[str, ...]], ann_id: str) -> bool:
    return bool(correspondence.get(ann_id, ()))


def _pred_same(unit_sets: list[UnitSet]) -> set[tuple[str, str]]:
    out = set()
    for units in unit_sets:
        for unit in units.units:
            members = sorted(unit)
            for i, a in enumerate(members):
                for b in members[i + 1:]:
                    out.add((a, b))
    return out


def _filtered_universe(d: Dataset, correspondence) -> list[tuple[str, str]]:
    pairs = []
    for image in sorted(d.images, key=lambda im: im.id):
        for a, b in _cross_rater_pairs(d, image.id):
            if _covered(correspondence, a) or _covered(correspondence, b):
                pairs.append((a, b))
    return pairs


def filtered_rand_index(unit_sets: list[UnitSet], d: Dataset,
                        correspondence: dict[str, tuple[str, ...]]) -> float | None:
    """Rand index over cross-rater pairs where at least one member has a
    known reference correspondence; None when no such pair exists."""
    universe = _filtered_universe(d, correspondence)
    if not universe:
        return None
    predicted = _pred_same(unit_sets)
    agreements = 0
    for a, b in universe:
        if ((a, b) in predicted) == _truth_same(correspondence, a, b):
            agreements += 1
    return agreements / len(universe)


def pair_metrics(unit_sets: list[UnitSet], d: Dataset,
                 correspondence: dict[str, tuple[str, ...]]) -> PairMetrics:
    """Precision/recall/F1 over the filtered pair universe plus the failure
    taxonomy: FP matches, missed opportunities and cuckoo eggs (a missed
    pair whose member was displaced by an FP inside the same unit)."""
    universe = _filtered_universe(d, correspondence)
    predicted = _pred_same(unit_sets)
    unit_of: dict[str, frozenset[str]] = {}
    for units in unit_sets:
        for unit in units.units:
            for member in unit:
                unit_of[member] = unit

    outcomes: list[PairOutcome] = []
    tp = fp = missed = cuckoo = 0
    fp_members: set[str] = set()
    fp_pairs: list[tuple[str, str]] = []
    for a, b in universe:
        pred = (a, b) in predicted
        truth = _truth_same(correspondence, a, b)
        if pred and truth:
            tp += 1
            outcomes.append(PairOutcome("tp", a, b))
        elif pred:
            fp += 1
            outcomes.append(PairOutcome("fp", a, b))
            fp_members.update((a, b))
            fp_pairs.append((a, b))
    for a, b in universe:
        if _truth_same(correspondence, a, b) and (a, b) not in predicted:
            missed += 1
            outcomes.append(PairOutcome("missed", a, b))
            displaced = False
            for member in (a, b):
                unit = unit_of.get(member)
                if unit is None:
                    continue
                if any(member in (fa, fb) and (fa in unit and fb in unit) for fa, fb in fp_pairs):
                    displaced = True
            if displaced:
                cuckoo += 1
                outcomes.append(PairOutcome("cuckoo", a, b))
    precision = tp / (tp + fp) if (tp + fp) else None
    recall = tp / (tp + missed) if (tp + missed) else None
    f1 = None
    if precision is not None and recall is not None and (precision + recall) > 0:
        f1 = 2 * precision * recall / (precision + recall)
    elif precision is not None and recall is not None:
        f1 = 0.0
    return PairMetrics(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp,
                       missed=missed, cuckoo=cuckoo, outcomes=outcomes)


# ---------------------------------------------------------------------------
# Permutation stability


def _labels(unit_sets: list[UnitSet], ann_ids: list[str]) -> list[int]:
    label_of: dict[str, int] = {}
    next_label = 0
    for units in unit_sets:
        for unit in sorted(units.units, key=lambda u: tuple(sorted(u))):
            for member in unit:
                label_of[member] = next_label
            next_label += 1
    return [label_of[a] for a in ann_ids]


def _permuted_view(d: Dataset, rng: np.random.Generator) -> Dataset:
    images = list(d.images)
    raters = list(d.raters)
    annotations = list(d.annotations)
    rng.shuffle(images)
    rng.shuffle(raters)
    rng.shuffle(annotations)
    return Dataset(images=tuple(images), raters=tuple(raters), assignments=d.assignments,
                   categories=d.categories, annotations=tuple(annotations))


def permutation_stability(d: Dataset, cfg: PipelineConfig, n_perms: int = 20,
                          seed: int = 0, jobs: int = 1) -> dict:
    """ARI between the baseline clustering and re-runs on permuted input
    orders; a content-tie-broken solver scores exactly 1."""
    from ._parallel import parallel_map

    if n_perms < 2:
        raise ValueError("need at least 2 permutations")
    ann_ids = sorted(a.id for a in d.annotations)
    base = _labels(solve_units(d, cfg), ann_ids)

    def one(perm: int) -> float:
        rng = np.random.default_rng(np.random.SeedSequence([seed, perm]))
        view = _permuted_view(d, rng)
        labels = _labels(solve_units(view, cfg), ann_ids)
        return float(adjusted_rand_score(base, labels))

    scores = parallel_map(one, range(n_perms), jobs=jobs)
    return {"ari_mean": float(np.mean(scores)), "ari_min": float(np.min(scores)),
            "ari_values": scores, "n_perms": n_perms}


# ---------------------------------------------------------------------------
# Experiment suite


@dataclass
class SuiteRow:
    solver: str
    cost: str
    lam: float
    raters: int
    seed: int
    filtered_rand_index: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    missed: int
    cuckoo: int
    mean_alpha: float | None
    global_alpha: float | None
    signal_loss: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "solver": self.solver, "cost": self.cost, "lambda": self.lam,
            "raters": self.raters, "seed": self.seed,
            "filtered_rand_index": self.filtered_rand_index,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "missed": self.missed, "cuckoo": self.cuckoo,
            "mean_alpha": self.mean_alpha, "global_alpha": self.global_alpha,
            "signal_loss": self.signal_loss, "error": self.error,
        }


@dataclass
class ClusterRow:
    group_a: int
    group_b: int
    lam: float
    seed: int
    mean_alpha: float | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"group_a": self.group_a, "group_b": self.group_b, "lambda": self.lam,
                "seed": self.seed, "mean_alpha": self.mean_alpha, "error": self.error}


@dataclass
class ExperimentReport:
    rows: list[SuiteRow]
    cluster_rows: list[ClusterRow]
    config: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": [r.to_dict() for r in self.rows],
                "collaboration": [r.to_dict() for r in self.cluster_rows]}


def cell_seed(seed: int, *parts) -> int:
    text = "|".join(str(p) for p in (seed,) + parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big")


def evaluate_synthesis(synthesis: SynthesisResult, cfg: PipelineConfig) -> dict:
    unit_sets = solve_units(synthesis.dataset, cfg)
    score = score_dataset(synthesis.dataset, cfg)
    metrics = pair_metrics(unit_sets, synthesis.dataset, synthesis.correspondence)
    return {
        "filtered_rand_index": filtered_rand_index(unit_sets, synthesis.dataset,
                                                   synthesis.correspondence),
        "metrics": metrics,
        "mean_alpha": score.mean.mean,
        "global_alpha": score.global_value,
    }


def run_suite(reference: Dataset, model: NoiseModel, lambdas, rater_counts, solvers, costs,
              seed: int = 0, base: PipelineConfig | None = None,
              cluster_sizes: list[tuple[int, int]] | None = None,
              jobs: int = 1) -> ExperimentReport:
    """Full factorial sweep; failing cells are isolated into their row.

    Cells carry derived seeds keyed by their coordinates, so parallel
    execution assembles the identical report.
    """
    from ._parallel import parallel_map

    base = base or PipelineConfig()

    def run_cell(cell: tuple[float, int]) -> list[SuiteRow]:
        lam, raters = cell
        cell_rows: list[SuiteRow] = []
        synthesis = generate(reference, model, lam, raters,
                             seed=cell_seed(seed, "gen", lam, raters))
        for solver in solvers:
            for cost in costs:
                cfg = PipelineConfig(metric=base.metric, tau=base.tau, solver=solver,
                                     cost=cost, aggregation=base.aggregation)
                try:
                    result = evaluate_synthesis(synthesis, cfg)
                    m: PairMetrics = result["metrics"]
                    cell_rows.append(SuiteRow(
                        solver=solver, cost=cost, lam=lam, raters=raters, seed=seed,
                        filtered_rand_index=result["filtered_rand_index"],
                        precision=m.precision, recall=m.recall, f1=m.f1,
                        tp=m.tp, fp=m.fp, missed=m.missed, cuckoo=m.cuckoo,
                        mean_alpha=result["mean_alpha"], global_alpha=result["global_alpha"],
                        signal_loss=synthesis.signal_loss))
                except Exception as exc:  # per-cell isolation
                    cell_rows.append(SuiteRow(
                        solver=solver, cost=cost, lam=lam, raters=raters, seed=seed,
                        filtered_rand_index=None, precision=None, recall=None, f1=None,
                        tp=0, fp=0, missed=0, cuckoo=0, mean_alpha=None,
                        global_alpha=None, signal_loss=synthesis.signal_loss,
                        error=f"{type(exc).__name__}: {exc}"))
        return cell_rows

    cells = [(lam, raters) for lam in lambdas for raters in rater_counts]
    rows = [row for cell_rows in parallel_map(run_cell, cells, jobs=jobs)
            for row in cell_rows]

    cluster_rows: list[ClusterRow] = []
    if cluster_sizes and len(reference.raters) >= 2:
        for size_a, size_b in cluster_sizes:
            for lam in lambdas:
                try:
                    synthesis = generate_collaboration(
                        reference, (size_a, size_b), model, lam,
                        seed=cell_seed(seed, "collab", size_a, size_b, lam))
                    score = score_dataset(synthesis.dataset, base)
                    cluster_rows.append(ClusterRow(group_a=size_a, group_b=size_b, lam=lam,
                                                   seed=seed, mean_alpha=score.mean.mean))
                except Exception as exc:
                    cluster_rows.append(ClusterRow(group_a=size_a, group_b=size_b, lam=lam,
                                                   seed=seed, mean_alpha=None,
                                                   error=f"{type(exc).__name__}: {exc}"))

    config = {
        "lambdas": [float(_l) for _l in lambdas],
        "rater_counts": [int(r) for r in rater_counts],
        "solvers": list(solvers),
        "costs": list(costs),
        "seed": seed,
        "pipeline": base.echo(),
        "cluster_sizes": [list(c) for c in (cluster_sizes or [])],
    }
    return ExperimentReport(rows=rows, cluster_rows=cluster_rows, config=config)
