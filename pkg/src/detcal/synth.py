"""Synthetic matched-sample generators with controllable miscalibration.

Each scenario draws boxes from a seeded sampler, assigns a true precision
via a field over the box geometry, emits a confidence via a second field,
and draws the binary match label from the precision. Because both fields
are explicit functions of position and scale, the generated datasets carry
known location- and scale-dependent miscalibration, which replaces detector
output for testing and for the evaluation protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .detections import BoxGeometry, Detection
from .errors import ScenarioError, UsageError
from .matching import MatchedSample

BoxSampler = Callable[[np.random.Generator, int], np.ndarray]
PrecisionField = Callable[[np.ndarray], np.ndarray]
ConfidenceField = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ScenarioSpec:
    """A generative recipe: box sampler plus precision and confidence fields.

    Both fields are vectorized: they receive an ``(n, 4)`` array of
    ``(cx, cy, w, h)`` columns (the confidence field additionally receives
    the per-sample true precision) and must return valid probabilities.
    """

    name: str
    n_samples: int
    precision_field: PrecisionField
    confidence_field: ConfidenceField
    box_sampler: BoxSampler
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise UsageError(f"sample count must be >= 1, got {self.n_samples}")


def default_box_sampler(rng: np.random.Generator, n: int) -> np.ndarray:
    """Centers uniform on [0.05, 0.95], sizes log-uniform on [0.02, 0.5].

    Sizes are truncated so every box stays inside the image, keeping the
    geometry invariants intact without clamping.
    """
    cx = rng.uniform(0.05, 0.95, n)
    cy = rng.uniform(0.05, 0.95, n)
    w = np.exp(rng.uniform(math.log(0.02), math.log(0.5), n))
    h = np.exp(rng.uniform(math.log(0.02), math.log(0.5), n))
    w = np.minimum(w, 2.0 * np.minimum(cx, 1.0 - cx))
    h = np.minimum(h, 2.0 * np.minimum(cy, 1.0 - cy))
    return np.column_stack([cx, cy, w, h])


_INTERIOR_SIZE_RANGE = (0.02, 0.2)


def interior_box_sampler(rng: np.random.Generator, n: int) -> np.ndarray:
    """Centers uniform on [0.1, 0.9], sizes log-uniform on [0.02, 0.2].

    The ranges guarantee boxes never cross the image boundary, so box scale
    stays statistically independent of position; the built-in scenarios rely
    on that independence.
    """
    lo, hi = _INTERIOR_SIZE_RANGE
    cx = rng.uniform(0.1, 0.9, n)
    cy = rng.uniform(0.1, 0.9, n)
    w = np.exp(rng.uniform(math.log(lo), math.log(hi), n))
    h = np.exp(rng.uniform(math.log(lo), math.log(hi), n))
    return np.column_stack([cx, cy, w, h])


def _boundary_closeness(boxes: np.ndarray) -> np.ndarray:
    """0 at the image center, growing additively toward corners (max 0.8 interior)."""
    return np.abs(boxes[:, 0] - 0.5) + np.abs(boxes[:, 1] - 0.5)


def _scale_coordinate(boxes: np.ndarray) -> np.ndarray:
    """Log-area of the box normalized to [0, 1] over the interior sampler range."""
    lo, hi = _INTERIOR_SIZE_RANGE
    span = 2.0 * (math.log(hi) - math.log(lo))
    return (np.log(boxes[:, 2]) + np.log(boxes[:, 3]) - 2.0 * math.log(lo)) / span


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _fig3_boundary_decay(n: int, seed: int) -> ScenarioSpec:
    # Precision and confidence both fall toward the image boundary with
    # different slopes; the confidence spread within a location comes from
    # the (position-independent) box scale, so a confidence-only map cannot
    # resolve the location dependence.
    def precision(boxes):
        return 0.80 - 0.50 * _boundary_closeness(boxes)

    def confidence(boxes, precision):
        return 0.92 - 0.20 * _boundary_closeness(boxes) - 0.25 * _scale_coordinate(boxes)

    return ScenarioSpec(
        name="fig3_boundary_decay",
        n_samples=n,
        precision_field=precision,
        confidence_field=confidence,
        box_sampler=interior_box_sampler,
        seed=seed,
    )


def _perfectly_calibrated(n: int, seed: int) -> ScenarioSpec:
    def field(boxes):
        return 0.90 - 0.45 * _boundary_closeness(boxes) - 0.20 * _scale_coordinate(boxes)

    return ScenarioSpec(
        name="perfectly_calibrated",
        n_samples=n,
        precision_field=field,
        confidence_field=lambda boxes, precision: precision.copy(),
        box_sampler=interior_box_sampler,
        seed=seed,
    )


def _uniform_overconfident(n: int, seed: int) -> ScenarioSpec:
    # The true precision is an exact Platt transform of the confidence, so a
    # one-dimensional logistic map can recalibrate this scenario completely.
    def confidence(boxes):
        return 0.25 + 0.70 * _scale_coordinate(boxes)

    def precision(boxes):
        return _sigmoid(_logit(confidence(boxes)) - 1.0)

    return ScenarioSpec(
        name="uniform_overconfident",
        n_samples=n,
        precision_field=precision,
        confidence_field=lambda boxes, p: confidence(boxes),
        box_sampler=interior_box_sampler,
        seed=seed,
    )


def _scale_dependent(n: int, seed: int) -> ScenarioSpec:
    def precision(boxes):
        return 0.85 - 0.45 * _scale_coordinate(boxes)

    def confidence(boxes, precision):
        return 0.88 - 0.15 * _scale_coordinate(boxes) - 0.10 * _boundary_closeness(boxes)

    return ScenarioSpec(
        name="scale_dependent",
        n_samples=n,
        precision_field=precision,
        confidence_field=confidence,
        box_sampler=interior_box_sampler,
        seed=seed,
    )


_SCENARIOS: dict[str, Callable[[int, int], ScenarioSpec]] = {
    "fig3_boundary_decay": _fig3_boundary_decay,
    "perfectly_calibrated": _perfectly_calibrated,
    "uniform_overconfident": _uniform_overconfident,
    "scale_dependent": _scale_dependent,
}


def builtin_scenarios() -> dict[str, Callable[[int, int], ScenarioSpec]]:
    """Factories for the named scenarios, keyed by scenario name."""
    return dict(_SCENARIOS)


def make_scenario(name: str, n_samples: int, seed: int = 0) -> ScenarioSpec:
    """Instantiate a named scenario; unknown names raise :class:`UsageError`."""
    try:
        factory = _SCENARIOS[name]
    except KeyError:
        raise UsageError(
            f"unknown scenario {name!r}; expected one of {sorted(_SCENARIOS)}"
        ) from None
    return factory(n_samples, seed)


def generate(spec: ScenarioSpec) -> list[MatchedSample]:
    """Draw a matched-sample dataset from the scenario, deterministically per seed.

    Matched samples receive a synthetic ground-truth index and an IoU of 1;
    the records use the matcher's output schema so downstream tooling cannot
    tell them from real matched detections.
    """
    rng = np.random.default_rng(spec.seed)
    boxes = np.asarray(spec.box_sampler(rng, spec.n_samples), dtype=np.float64)
    if boxes.shape != (spec.n_samples, 4):
        raise ScenarioError(
            f"box sampler returned shape {boxes.shape}, expected ({spec.n_samples}, 4)"
        )
    precision = np.asarray(spec.precision_field(boxes), dtype=np.float64)
    _check_field("precision", precision, spec.n_samples)
    confidence = np.asarray(spec.confidence_field(boxes, precision), dtype=np.float64)
    _check_field("confidence", confidence, spec.n_samples)
    matched = rng.random(spec.n_samples) < precision

    samples = []
    for i in range(spec.n_samples):
        detection = Detection(
            image_id=i,
            category_id=1,
            score=float(confidence[i]),
            box=BoxGeometry(*boxes[i]),
        )
        if matched[i]:
            samples.append(MatchedSample(detection, matched=1, iou=1.0, gt_index=i))
        else:
            samples.append(MatchedSample(detection, matched=0))
    return samples


def _check_field(name: str, values: np.ndarray, n: int) -> None:
    if values.shape != (n,):
        raise ScenarioError(f"{name} field returned shape {values.shape}, expected ({n},)")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ScenarioError(
            f"{name} field left [0, 1]: range [{values.min()}, {values.max()}]"
        )
