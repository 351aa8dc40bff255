"""End-to-end scoring pipeline: correspondence -> reliability -> alpha."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .correspondence import UnitSet, solve_image
from .dataset import Dataset
from .reliability import (
    MeanAlphaResult,
    ReliabilityMatrix,
    build_reliability_matrix,
    global_alpha,
    mean_alpha,
)


@dataclass(frozen=True)
class PipelineConfig:
    metric: str = "box_iou"
    tau: float = 0.5
    solver: str = "greedy"
    cost: str = "soft"
    aggregation: str = "both"  # mean | global | both

    def echo(self) -> str:
        return f"KaLOS(d={self.metric}, tau={self.tau:g}, S={self.solver}, psi={self.cost})"

    def with_tau(self, tau: float) -> "PipelineConfig":
        return replace(self, tau=tau)


def solve_units(d: Dataset, cfg: PipelineConfig) -> list[UnitSet]:
    """One UnitSet per image, in sorted image order."""
    out = []
    for image in sorted(d.images, key=lambda im: im.id):
        anns = d.annotations_by_image.get(image.id, ())
        out.append(solve_image(anns, cfg.metric, cfg.tau, cfg.cost, cfg.solver))
    return out


def build_matrices(d: Dataset, cfg: PipelineConfig) -> list[ReliabilityMatrix]:
    matrices = []
    for image, units in zip(sorted(d.images, key=lambda im: im.id), solve_units(d, cfg)):
        if not units.image_id:
            units = UnitSet(image_id=image.id, units=units.units)
        matrices.append(build_reliability_matrix(units, d))
    return matrices


@dataclass
class ScoreResult:
    config: PipelineConfig
    mean: MeanAlphaResult
    global_value: float | None
    global_band: str | None
    matrices: list[ReliabilityMatrix]

    def to_dict(self) -> dict:
        return {
            "configuration": self.config.echo(),
            "mean_alpha": self.mean.mean,
            "mean_band": self.mean.band,
            "global_alpha": self.global_value,
            "global_band": self.global_band,
            "per_image": [{"image_id": i, "alpha": v} for i, v in self.mean.per_image],
            "skipped_images": self.mean.skipped,
            "undefined_count": self.mean.skipped,
        }


def score_dataset(d: Dataset, cfg: PipelineConfig) -> ScoreResult:
    matrices = build_matrices(d, cfg)
    mean = mean_alpha(matrices)
    g = global_alpha(matrices)
    return ScoreResult(config=cfg, mean=mean, global_value=g.value, global_band=g.band,
                       matrices=matrices)
