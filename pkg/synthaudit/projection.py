"""Exact t-SNE of pooled real and synthetic embeddings, plus scatter export."""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.spatial.distance import cdist

from .config import (
    TSNE_EXAGGERATION_ITERATIONS, TSNE_FINAL_MOMENTUM, TSNE_INIT_STD, TSNE_INITIAL_MOMENTUM, TSNE_MAX_STEP,
    TSNE_MIN_GAIN, TsneParams,
)
from .corpus import ClinicalReport, ReportSource
from .embedding_service import EmbeddingSet, Granularity
from .errors import ProjectionError
from .rendering import render_template

logger = logging.getLogger(__name__)

MIN_POINTS = 5
SEARCH_STEPS = 200
SEARCH_TOL = 1e-5
KL_TRACE_EVERY = 50
PERPLEXITY_MARGIN = 1e-6
REAL_GROUP = "real"
SCATTER_COLUMNS = ["id", "x", "y", "group"]
PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"]


class ProjectedPoint(BaseModel):
    id: str
    x: float
    y: float
    group: str


class TsneRun(NamedTuple):
    coordinates: np.ndarray
    initial_kl: float
    final_kl: float
    kl_trace: List[float]


def group_label(report: ClinicalReport) -> str:
    if report.source == ReportSource.REAL:
        return REAL_GROUP
    return f"synthetic:{report.generator}"


def _entropy(distances: np.ndarray, beta: float):
    weights = np.exp(-distances * beta)
    total = weights.sum()
    entropy = math.log(total) + beta * float(np.dot(distances, weights)) / total
    return entropy, weights / total


def perplexity_search(distances_row: Sequence[float], target_perplexity: float,
                      tol: float = SEARCH_TOL, max_steps: int = SEARCH_STEPS) -> float:
    """
    Precision beta of one conditional Gaussian with the target perplexity

    Bisection on log-perplexity over the squared distances to the other points.
    """
    row = np.asarray(distances_row, dtype=np.float64)
    if row.size < 2:
        raise ProjectionError(f"perplexity search needs at least 2 distances, got {row.size}")
    if not np.any(row):
        logger.warning("All distances in row are zero; using beta=1")
        return 1.0

    shifted = row - row.min()
    target = math.log(target_perplexity)
    beta, beta_min, beta_max = 1.0, 0.0, math.inf
    for _ in range(max_steps):
        entropy, _ = _entropy(shifted, beta)
        diff = entropy - target
        if abs(diff) <= tol:
            return beta
        if diff > 0:
            beta_min = beta
            beta = beta * 2.0 if beta_max == math.inf else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = (beta + beta_min) / 2.0
    logger.warning(f"Perplexity search did not converge in {max_steps} steps (beta={beta:.4g})")
    return beta


def effective_perplexity(perplexity: float, n_points: int) -> float:
    """Clamp strictly below (N-1)/3; never under min(2, (N-1)/2)"""
    return max(min(perplexity, (n_points - 1) / 3.0 - PERPLEXITY_MARGIN), min(2.0, (n_points - 1) / 2.0))


def joint_probabilities(squared_distances: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinities: symmetric, zero diagonal, summing to 1"""
    n = squared_distances.shape[0]
    conditional = np.zeros((n, n))
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = squared_distances[i, mask[i]]
        beta = perplexity_search(row, perplexity)
        _, probabilities = _entropy(row - row.min(), beta)
        conditional[i, mask[i]] = probabilities
    joint = conditional + conditional.T
    return joint / joint.sum()


def student_t_affinities(coordinates: np.ndarray):
    """Q matrix and the unnormalized kernel 1 / (1 + |y_i - y_j|^2)"""
    kernel = 1.0 / (1.0 + cdist(coordinates, coordinates, "sqeuclidean"))
    np.fill_diagonal(kernel, 0.0)
    return kernel / kernel.sum(), kernel


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / np.maximum(q[support], np.finfo(float).tiny))))


def run_tsne(vectors: np.ndarray, params: Optional[TsneParams] = None) -> TsneRun:
    """
    Gradient descent on KL(P || Q) with early exaggeration, momentum and adaptive gains

    KL values are measured against the unexaggerated P.
    """
    params = params or TsneParams()
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n < MIN_POINTS:
        raise ProjectionError(f"t-SNE needs at least {MIN_POINTS} points, got {n}")
    if vectors.ndim != 2 or vectors.shape[1] < 2:
        raise ProjectionError("t-SNE needs vectors of dim >= 2")

    perplexity = effective_perplexity(params.perplexity, n)
    if perplexity != params.perplexity:
        logger.warning(f"Perplexity {params.perplexity} too large for {n} points; using {perplexity:.3f}")

    p = joint_probabilities(cdist(vectors, vectors, "sqeuclidean"), perplexity)
    learning_rate = params.resolved_learning_rate(n)
    rng = np.random.default_rng(params.seed)
    coordinates = rng.normal(0.0, TSNE_INIT_STD, size=(n, 2))
    update = np.zeros_like(coordinates)
    gains = np.ones_like(coordinates)
    logger.debug(f"t-SNE learning rate {learning_rate:.2f}, perplexity {perplexity:.3f}")

    initial_kl = kl_divergence(p, student_t_affinities(coordinates)[0])
    trace = [initial_kl]
    for iteration in range(params.iterations):
        early = iteration < TSNE_EXAGGERATION_ITERATIONS
        exaggeration = params.early_exaggeration_factor if early else 1.0
        momentum = TSNE_INITIAL_MOMENTUM if early else TSNE_FINAL_MOMENTUM
        if iteration == TSNE_EXAGGERATION_ITERATIONS:
            # вторая фаза начинается с чистыми gains и без инерции
            update = np.zeros_like(coordinates)
            gains = np.ones_like(coordinates)

        q, kernel = student_t_affinities(coordinates)
        weights = (exaggeration * p - q) * kernel
        gradient = 4.0 * (weights.sum(axis=1)[:, None] * coordinates - weights @ coordinates)
        if not np.all(np.isfinite(gradient)):
            norm = float(np.linalg.norm(gradient))
            raise ProjectionError(f"non-finite gradient at iteration {iteration} (gradient norm {norm})")

        same_sign = (gradient > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.clip(gains, TSNE_MIN_GAIN, None, out=gains)
        update = momentum * update - learning_rate * gains * gradient
        # смещение точки не больше TSNE_MAX_STEP
        step = np.linalg.norm(update, axis=1, keepdims=True)
        update *= np.minimum(1.0, TSNE_MAX_STEP / np.maximum(step, np.finfo(float).tiny))
        coordinates = coordinates + update
        coordinates -= coordinates.mean(axis=0)
        if not np.all(np.isfinite(coordinates)):
            norm = float(np.linalg.norm(gradient))
            raise ProjectionError(f"non-finite coordinates at iteration {iteration} (gradient norm {norm})")

        if (iteration + 1) % KL_TRACE_EVERY == 0:
            trace.append(kl_divergence(p, student_t_affinities(coordinates)[0]))

    final_kl = kl_divergence(p, student_t_affinities(coordinates)[0])
    logger.info(f"t-SNE on {n} points: KL {initial_kl:.4f} -> {final_kl:.4f}")
    return TsneRun(coordinates, initial_kl, final_kl, trace)


def tsne(embeddings: EmbeddingSet, params: Optional[TsneParams] = None,
         groups: Optional[Mapping[str, str]] = None) -> List[ProjectedPoint]:
    """Project a pooled text embedding set; points come back in id order"""
    if embeddings.granularity != Granularity.TEXT:
        raise ProjectionError("t-SNE needs text-granularity embeddings")
    ids = sorted(embeddings.ids())
    groups = groups or {}
    run = run_tsne(embeddings.matrix(ids), params)
    return [
        ProjectedPoint(id=report_id, x=float(x), y=float(y), group=groups.get(report_id, REAL_GROUP))
        for report_id, (x, y) in zip(ids, run.coordinates)
    ]


def _svg_points(points: Sequence[ProjectedPoint], size: int = 640, margin: int = 40) -> Dict[str, object]:
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    span = max(float(xs.max() - xs.min()), float(ys.max() - ys.min())) or 1.0
    scale = (size - 2 * margin) / span
    labels = sorted({p.group for p in points})
    colors = {label: PALETTE[i % len(PALETTE)] for i, label in enumerate(labels)}
    circles = [
        {"id": p.id, "cx": margin + (p.x - xs.min()) * scale, "cy": size - margin - (p.y - ys.min()) * scale,
         "color": colors[p.group]}
        for p in points
    ]
    return {"size": size, "circles": circles, "legend": [{"label": label, "color": colors[label]} for label in labels]}


def export_scatter(points: Sequence[ProjectedPoint], path: Path, svg_path: Optional[Path] = None) -> None:
    """Tab-separated id/x/y/group rows; optional SVG with one color per group"""
    if not points:
        raise ProjectionError("no points to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
            writer.writerow(SCATTER_COLUMNS)
            for point in points:
                writer.writerow([point.id, repr(point.x), repr(point.y), point.group])
        if svg_path is not None:
            Path(svg_path).write_text(render_template("scatter.svg.j2", **_svg_points(points)), encoding="utf-8")
    except OSError as e:
        raise ProjectionError(f"cannot write scatter: {e}") from e
    logger.info(f"Wrote {len(points)} projected points to {path}")


def load_scatter(path: Path) -> List[ProjectedPoint]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        return [ProjectedPoint(id=row["id"], x=float(row["x"]), y=float(row["y"]), group=row["group"])
                for row in reader]
