"""The fitted noise model: parameter bundle, fitting from an error corpus,
external proxy tables (semantic similarity, proposal pool) and JSON
round-tripping.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Box2D
from ..stats import (
    BetaFit,
    FitError,
    LinearTModel,
    LogisticModel,
    PoissonModel,
    VonMisesMixture,
    fit_beta,
    fit_linear_t,
    fit_logistic,
    fit_poisson,
    fit_vonmises_mixture,
)
from .extraction import ErrorCorpus

SEMANTIC_TEMPERATURE = 0.1
SEMANTIC_TOP_K = 10
FP_IOU_MAX = 0.1
FN_FP_SPLIT = 0.5
MERGE_QUANTILE = 0.99
MIN_PAIRS = 20
MIN_ANGLES = 50


@dataclass(frozen=True)
class Proposal:
    image_id: str
    box: Box2D
    category_id: str
    score: float


@dataclass
class TransitionTable:
    """Per-category successor distribution derived from an external
    similarity matrix (softmax over the top-k neighbors), or a uniform
    fallback when no matrix is available."""

    categories: tuple[str, ...]
    probs: dict[str, tuple[tuple[str, ...], tuple[float, ...]]] | None = None
    uniform: bool = False

    def sample(self, rng: np.random.Generator, source: str) -> str:
        others = tuple(c for c in self.categories if c != source)
        if not others:
            return source
        if self.uniform or self.probs is None or source not in self.probs:
            return str(others[int(rng.integers(0, len(others)))])
        cats, weights = self.probs[source]
        return str(cats[int(rng.choice(len(cats), p=np.asarray(weights)))])

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "uniform": self.uniform,
            "probs": {c: {"categories": list(cs), "weights": list(ws)}
                      for c, (cs, ws) in self.probs.items()} if self.probs else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionTable":
        probs = None
        if d.get("probs"):
            probs = {c: (tuple(v["categories"]), tuple(v["weights"])) for c, v in d["probs"].items()}
        return cls(categories=tuple(d["categories"]), probs=probs, uniform=d.get("uniform", False))


def build_transition_table(categories, similarity: dict[tuple[str, str], float] | None,
                           temperature: float = SEMANTIC_TEMPERATURE,
                           top_k: int = SEMANTIC_TOP_K) -> TransitionTable:
    cats = tuple(sorted(categories))
    if similarity is None:
        return TransitionTable(categories=cats, probs=None, uniform=True)
    probs: dict[str, tuple[tuple[str, ...], tuple[float, ...]]] = {}
    for source in cats:
        sims = [(similarity.get((source, c), similarity.get((c, source), -1.0)), c)
                for c in cats if c != source]
        sims.sort(key=lambda t: (-t[0], t[1]))
        top = sims[:top_k]
        if not top:
            continue
        logits = np.asarray([s for s, _ in top]) / temperature
        weights = np.exp(logits - logits.max())
        weights = weights / weights.sum()
        probs[source] = (tuple(c for _, c in top), tuple(float(w) for w in weights))
    return TransitionTable(categories=cats, probs=probs, uniform=False)


@dataclass
class CategoryModel:
    p_global: float
    transition: TransitionTable
    temperature: float = SEMANTIC_TEMPERATURE
    direction: VonMisesMixture | None = None
    translation: LinearTModel | None = None
    scale_w: LinearTModel | None = None
    scale_h: LinearTModel | None = None

    def to_dict(self) -> dict:
        return {
            "p_global": self.p_global,
            "temperature": self.temperature,
            "transition": self.transition.to_dict(),
            "direction": self.direction.to_dict() if self.direction else None,
            "translation": self.translation.to_dict() if self.translation else None,
            "scale_w": self.scale_w.to_dict() if self.scale_w else None,
            "scale_h": self.scale_h.to_dict() if self.scale_h else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryModel":
        return cls(
            p_global=d["p_global"],
            temperature=d.get("temperature", SEMANTIC_TEMPERATURE),
            transition=TransitionTable.from_dict(d["transition"]),
            direction=VonMisesMixture.from_dict(d["direction"]) if d.get("direction") else None,
            translation=LinearTModel.from_dict(d["translation"]) if d.get("translation") else None,
            scale_w=LinearTModel.from_dict(d["scale_w"]) if d.get("scale_w") else None,
            scale_h=LinearTModel.from_dict(d["scale_h"]) if d.get("scale_h") else None,
        )


@dataclass
class UnmatchedModel:
    rate: PoissonModel
    select: LogisticModel
    fp_split: float = FN_FP_SPLIT
    fp_iou_max: float = FP_IOU_MAX
    fp_fallback: str | None = None  # None | "random_box"

    def to_dict(self) -> dict:
        return {"rate": self.rate.to_dict(), "select": self.select.to_dict(),
                "fp_split": self.fp_split, "fp_iou_max": self.fp_iou_max,
                "fp_fallback": self.fp_fallback}

    @classmethod
    def from_dict(cls, d: dict) -> "UnmatchedModel":
        return cls(rate=PoissonModel.from_dict(d["rate"]), select=LogisticModel.from_dict(d["select"]),
                   fp_split=d.get("fp_split", FN_FP_SPLIT), fp_iou_max=d.get("fp_iou_max", FP_IOU_MAX),
                   fp_fallback=d.get("fp_fallback"))


@dataclass
class TopologyModel:
    enabled: bool
    parent: LogisticModel | None = None
    child_translation: LinearTModel | None = None
    child_scale_w: LinearTModel | None = None
    child_scale_h: LinearTModel | None = None
    kappa_offset: float = 0.0
    child_angle: BetaFit | None = None
    merge_threshold: float = math.inf

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "parent": self.parent.to_dict() if self.parent else None,
            "child_translation": self.child_translation.to_dict() if self.child_translation else None,
            "child_scale_w": self.child_scale_w.to_dict() if self.child_scale_w else None,
            "child_scale_h": self.child_scale_h.to_dict() if self.child_scale_h else None,
            "kappa_offset": self.kappa_offset,
            "child_angle": self.child_angle.to_dict() if self.child_angle else None,
            "merge_threshold": self.merge_threshold if math.isfinite(self.merge_threshold) else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopologyModel":
        return cls(
            enabled=d["enabled"],
            parent=LogisticModel.from_dict(d["parent"]) if d.get("parent") else None,
            child_translation=LinearTModel.from_dict(d["child_translation"])
            if d.get("child_translation") else None,
            child_scale_w=LinearTModel.from_dict(d["child_scale_w"]) if d.get("child_scale_w") else None,
            child_scale_h=LinearTModel.from_dict(d["child_scale_h"]) if d.get("child_scale_h") else None,
            kappa_offset=d.get("kappa_offset", 0.0),
            child_angle=BetaFit.from_dict(d["child_angle"]) if d.get("child_angle") else None,
            merge_threshold=d["merge_threshold"] if d.get("merge_threshold") is not None else math.inf,
        )


@dataclass
class NoiseModel:
    translation: LinearTModel
    direction: VonMisesMixture
    scale_w: LinearTModel
    scale_h: LinearTModel
    category: CategoryModel
    unmatched: UnmatchedModel
    topology: TopologyModel
    proposals: list[Proposal] = field(default_factory=list)
    fallbacks: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def proposals_for(self, image_id: str) -> list[Proposal]:
        return [p for p in self.proposals if p.image_id == image_id]

    def to_dict(self) -> dict:
        return {
            "translation": self.translation.to_dict(),
            "direction": self.direction.to_dict(),
            "scale_w": self.scale_w.to_dict(),
            "scale_h": self.scale_h.to_dict(),
            "category": self.category.to_dict(),
            "unmatched": self.unmatched.to_dict(),
            "topology": self.topology.to_dict(),
            "proposals": [{"image_id": p.image_id, "bbox": [p.box.x, p.box.y, p.box.w, p.box.h],
                           "category_id": p.category_id, "score": p.score}
                          for p in self.proposals],
            "fallbacks": list(self.fallbacks),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(
            translation=LinearTModel.from_dict(d["translation"]),
            direction=VonMisesMixture.from_dict(d["direction"]),
            scale_w=LinearTModel.from_dict(d["scale_w"]),
            scale_h=LinearTModel.from_dict(d["scale_h"]),
            category=CategoryModel.from_dict(d["category"]),
            unmatched=UnmatchedModel.from_dict(d["unmatched"]),
            topology=TopologyModel.from_dict(d["topology"]),
            proposals=[Proposal(image_id=p["image_id"],
                                box=Box2D(*(float(v) for v in p["bbox"])),
                                category_id=p["category_id"], score=float(p.get("score", 0.0)))
                       for p in d.get("proposals", [])],
            fallbacks=list(d.get("fallbacks", [])),
            provenance=dict(d.get("provenance", {})),
        )


def save_noise_model(model: NoiseModel, path: str | Path) -> None:
    from ..reporting import dump_json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(model.to_dict()), encoding="utf-8")


def load_noise_model(path: str | Path) -> NoiseModel:
    return NoiseModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_similarity(path: str | Path) -> dict[tuple[str, str], float]:
    """Square similarity matrix keyed by category id, JSON or CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header = rows[0][1:]
        out: dict[tuple[str, str], float] = {}
        for row in rows[1:]:
            for col, value in zip(header, row[1:]):
                out[(row[0], col)] = float(value)
        return out
    doc = json.loads(path.read_text(encoding="utf-8"))
    cats = doc["categories"]
    matrix = doc["matrix"]
    return {(r, c): float(matrix[i][j]) for i, r in enumerate(cats) for j, c in enumerate(cats)}


def load_proposals(path: str | Path) -> list[Proposal]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Proposal(image_id=p["image_id"], box=Box2D(*(float(v) for v in p["bbox"])),
                     category_id=p["category_id"], score=float(p.get("score", 0.0)))
            for p in doc]


def _corpus_hash(corpus: ErrorCorpus) -> str:
    h = hashlib.sha256()
    for pair in corpus.matched_pairs:
        h.update(f"{pair.ann_a}|{pair.ann_b}|{pair.d_loc:.9f}".encode())
    for rec in corpus.unmatched:
        h.update(rec.ann_id.encode())
    for rec in corpus.topology:
        h.update(rec.parent.encode())
    return h.hexdigest()


def _synthetic_child_ratio(scale_w: LinearTModel, scale_h: LinearTModel,
                           parent_areas: np.ndarray, draws: int = 1000) -> float:
    rng = np.random.default_rng(0)
    areas = rng.choice(parent_areas, size=draws)
    lsw = scale_w.predict(areas) + scale_w.sample_residual(rng, draws)
    lsh = scale_h.predict(areas) + scale_h.sample_residual(rng, draws)
    lsw = np.minimum(lsw, -1e-3)
    lsh = np.minimum(lsh, -1e-3)
    return float(np.median(np.exp(lsw + lsh)))


def merge_score(model: "NoiseModel", box_a: Box2D, box_b: Box2D) -> float:
    """Likelihood that two boxes could be fragments of one parent.

    Inverts the fragmentation chain: the hypothetical parent is the union
    box, and the score is the joint density of the members' child-vector
    magnitude, child/parent log scales and opposing-side angle under the
    fitted topology (and translation) distributions.
    """
    topo = model.topology
    if not topo.enabled or topo.child_scale_w is None or topo.child_angle is None:
        return 0.0
    union = Box2D(min(box_a.x, box_b.x), min(box_a.y, box_b.y),
                  max(box_a.x + box_a.w, box_b.x + box_b.w) - min(box_a.x, box_b.x),
                  max(box_a.y + box_a.h, box_b.y + box_b.h) - min(box_a.y, box_b.y))
    parent_area = union.area()
    cu = union.centroid()
    ca, cb = box_a.centroid(), box_b.centroid()
    va = (ca[0] - cu[0], ca[1] - cu[1])
    vb = (cb[0] - cu[0], cb[1] - cu[1])
    mag = (math.hypot(*va) + math.hypot(*vb)) / 2.0
    placement = topo.child_translation or model.translation
    f_t = float(placement.residual_pdf(mag - float(placement.predict(parent_area))))
    lsw = (math.log(box_a.w / union.w) + math.log(box_b.w / union.w)) / 2.0
    lsh = (math.log(box_a.h / union.h) + math.log(box_b.h / union.h)) / 2.0
    trend_w = float(topo.child_scale_w.predict(parent_area)) + topo.kappa_offset
    trend_h = float(topo.child_scale_h.predict(parent_area)) + topo.kappa_offset
    f_w = float(topo.child_scale_w.residual_pdf(lsw - trend_w))
    f_h = float(topo.child_scale_h.residual_pdf(lsh - trend_h))
    na, nb = math.hypot(*va), math.hypot(*vb)
    if na < 1e-12 or nb < 1e-12:
        theta = 0.0
    else:
        cosang = max(-1.0, min(1.0, (va[0] * vb[0] + va[1] * vb[1]) / (na * nb)))
        theta = math.acos(cosang)
    angle_frac = min(max(theta / math.pi, 1e-6), 1.0 - 1e-6)
    return f_t * f_w * f_h * float(topo.child_angle.pdf(angle_frac))


def fit_noise_model(corpus: ErrorCorpus, similarity: dict | None = None,
                    proposals: list[Proposal] | None = None,
                    merge_quantile: float = MERGE_QUANTILE,
                    categories=None) -> NoiseModel:
    """Fit every sub-model; external proxies degrade to uniform fallbacks
    with a recorded flag when absent."""
    fallbacks: list[str] = []
    same = [p for p in corpus.matched_pairs if p.same_category]
    diff = [p for p in corpus.matched_pairs if not p.same_category]
    if len(same) < MIN_PAIRS:
        raise FitError(f"need at least {MIN_PAIRS} same-category matched pairs, got {len(same)}")

    areas = np.asarray([p.area_avg for p in same])
    magnitudes = np.asarray([math.hypot(*p.translation) for p in same])
    translation = fit_linear_t(areas, magnitudes)
    directions = np.asarray([p.direction for p in same])
    if directions.size >= MIN_ANGLES:
        direction = fit_vonmises_mixture(directions, mode="axis_centered")
    else:
        direction = fit_vonmises_mixture(np.resize(directions, MIN_ANGLES), mode="axis_centered")
        fallbacks.append("direction_angles_resampled")
    scale_w = fit_linear_t(areas, np.abs([p.log_scale_w for p in same]))
    scale_h = fit_linear_t(areas, np.abs([p.log_scale_h for p in same]))

    # Misclassified instances carry their own localization profile when the
    # corpus has enough of them; otherwise they reuse the clean profile.
    p_global = corpus.mismatch_rate()
    cat_kwargs: dict = {}
    if len(diff) >= MIN_PAIRS:
        d_areas = np.asarray([p.area_avg for p in diff])
        cat_kwargs["translation"] = fit_linear_t(d_areas, [math.hypot(*p.translation) for p in diff])
        cat_kwargs["scale_w"] = fit_linear_t(d_areas, np.abs([p.log_scale_w for p in diff]))
        cat_kwargs["scale_h"] = fit_linear_t(d_areas, np.abs([p.log_scale_h for p in diff]))
    else:
        fallbacks.append("misclassified_localization_reuses_clean_profile")
    diff_angles = np.asarray([p.direction for p in diff])
    if diff_angles.size >= MIN_ANGLES:
        cat_kwargs["direction"] = fit_vonmises_mixture(diff_angles, mode="unimodal_doubled")
    else:
        fallbacks.append("misclassified_direction_reuses_clean_profile")
    cat_ids = set(categories) if categories else set()
    for p in corpus.matched_pairs:
        cat_ids.update((p.category_a, p.category_b))
    if similarity is None:
        fallbacks.append("uniform_category_transition")
    transition = build_transition_table(cat_ids, similarity)
    category = CategoryModel(p_global=p_global, transition=transition, **cat_kwargs)

    rate = fit_poisson([c for c, _ in corpus.rate_records], [u for _, u in corpus.rate_records])
    select_x = [math.log(max(r.area, 1e-9)) for r in corpus.unmatched]
    select_y = [1] * len(corpus.unmatched)
    select_x += [math.log(max(a, 1e-9)) for a in corpus.matched_areas]
    select_y += [0] * len(corpus.matched_areas)
    try:
        select = fit_logistic(select_x, select_y)
    except FitError:
        select = LogisticModel(intercept=0.0, slope=0.0)
        fallbacks.append("uniform_unmatched_selection")
    unmatched = UnmatchedModel(rate=rate, select=select)
    if proposals is None:
        fallbacks.append("no_proposal_pool")

    topo_records = corpus.topology
    if topo_records:
        p_areas = np.asarray([r.parent_area for r in topo_records for _ in r.children])
        lsw = np.asarray([v for r in topo_records for v in r.child_log_scale_w])
        lsh = np.asarray([v for r in topo_records for v in r.child_log_scale_h])
        magnitudes = np.asarray([v for r in topo_records for v in r.child_magnitudes])
        try:
            parent = fit_logistic([math.log(max(a, 1e-9)) for a, _ in corpus.parent_labels],
                                  [y for _, y in corpus.parent_labels])
            child_translation = fit_linear_t(p_areas, magnitudes)
            child_scale_w = fit_linear_t(p_areas, lsw)
            child_scale_h = fit_linear_t(p_areas, lsh)
            angles = []
            for rec in topo_records:
                for i in range(len(rec.child_angles)):
                    for j in range(i + 1, len(rec.child_angles)):
                        gap = abs(rec.child_angles[i] - rec.child_angles[j])
                        gap = min(gap, 2.0 * math.pi - gap)
                        angles.append(gap / math.pi)
            child_angle = fit_beta(np.resize(np.asarray(angles), max(len(angles), MIN_PAIRS)))
            real_ratio = float(np.median([v for r in topo_records for v in r.child_area_ratios]))
            synth_ratio = _synthetic_child_ratio(child_scale_w, child_scale_h,
                                                 np.asarray([r.parent_area for r in topo_records]))
            kappa = 0.5 * math.log(real_ratio / synth_ratio) if synth_ratio > 0 else 0.0
            topology = TopologyModel(enabled=True, parent=parent,
                                     child_translation=child_translation,
                                     child_scale_w=child_scale_w,
                                     child_scale_h=child_scale_h, kappa_offset=kappa,
                                     child_angle=child_angle)
        except FitError as exc:
            topology = TopologyModel(enabled=False)
            fallbacks.append(f"topology_disabled:{exc}")
    else:
        topology = TopologyModel(enabled=False)
        fallbacks.append("topology_disabled:no_records")

    model = NoiseModel(
        translation=translation,
        direction=direction,
        scale_w=scale_w,
        scale_h=scale_h,
        category=category,
        unmatched=unmatched,
        topology=topology,
        proposals=list(proposals or []),
        fallbacks=fallbacks,
        provenance={"corpus_hash": _corpus_hash(corpus), "n_matched_pairs": corpus.n_pairs,
                    "n_unmatched": len(corpus.unmatched), "n_topology": len(corpus.topology)},
    )
    if topology.enabled:
        # Keep merges as rare as observed: threshold at a high quantile of
        # the score over ordinary (non-topology) same-category pairs.
        scores = []
        for p in same:
            a = corpus.boxes.get(p.ann_a)
            b = corpus.boxes.get(p.ann_b)
            if a is not None and b is not None:
                scores.append(merge_score(model, a, b))
        if len(scores) >= MIN_PAIRS:
            model.topology.merge_threshold = float(np.quantile(np.asarray(scores), merge_quantile))
        else:
            model.fallbacks.append("merge_disabled:insufficient_pairs")
    return model
