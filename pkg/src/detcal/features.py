"""Calibration input vectors built from matched samples.

A feature set selects an ordered subset of (confidence, cx, cy, w, h) with
the confidence always first; its size K is the dimension of the calibration
map and of any matching calibration-error binning. Values are clipped away
from {0, 1} so log and odds terms stay finite, and the confidence can be
carried either as a probability or as its logit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError, ValidationError
from .matching import MatchedSample

MEMBER_NAMES = ("confidence", "cx", "cy", "w", "h")
ENCODINGS = ("probability", "logit")
DEFAULT_CLIP = 1e-6

NAMED_FEATURE_SETS = {
    "conf": ("confidence",),
    "conf+xy": ("confidence", "cx", "cy"),
    "conf+wh": ("confidence", "w", "h"),
    "full": ("confidence", "cx", "cy", "w", "h"),
}

# A feature vector is a plain float array of length K in the feature set's
# member order.
FeatureVector = np.ndarray


@dataclass(frozen=True)
class FeatureSet:
    """Ordered feature subset plus the encoding used for the confidence entry."""

    members: tuple[str, ...]
    confidence_encoding: str = "probability"

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members or members[0] != "confidence":
            raise ValidationError("feature set must start with 'confidence'")
        if len(set(members)) != len(members):
            raise ValidationError(f"duplicate feature members in {members}")
        unknown = [m for m in members if m not in MEMBER_NAMES]
        if unknown:
            raise ValidationError(f"unknown feature members {unknown}")
        if self.confidence_encoding not in ENCODINGS:
            raise ValidationError(f"unknown confidence encoding {self.confidence_encoding!r}")

    @property
    def k(self) -> int:
        return len(self.members)


def feature_set(name: str, confidence_encoding: str = "probability") -> FeatureSet:
    """Look up one of the named feature sets: conf, conf+xy, conf+wh, full."""
    try:
        members = NAMED_FEATURE_SETS[name]
    except KeyError:
        raise UsageError(
            f"unknown feature set {name!r}; expected one of {sorted(NAMED_FEATURE_SETS)}"
        ) from None
    return FeatureSet(members=members, confidence_encoding=confidence_encoding)


def _check_eps(eps: float) -> float:
    if not 0.0 < eps < 0.5:
        raise UsageError(f"clip value must lie in (0, 0.5), got {eps}")
    return float(eps)


def raw_values(samples: Sequence[MatchedSample], members: Sequence[str]) -> np.ndarray:
    """Unclipped per-sample values for the given members, shape (n, len(members))."""
    columns = []
    for m in members:
        if m == "confidence":
            columns.append([s.detection.score for s in samples])
        elif m in ("cx", "cy", "w", "h"):
            columns.append([getattr(s.detection.box, m) for s in samples])
        else:
            raise UsageError(f"unknown feature member {m!r}")
    return np.asarray(columns, dtype=np.float64).T.reshape(len(samples), len(list(members)))


def build_feature_matrix(
    samples: Sequence[MatchedSample],
    fs: FeatureSet,
    eps: float = DEFAULT_CLIP,
) -> np.ndarray:
    """Clipped (and possibly logit-encoded) feature matrix of shape (n, K)."""
    eps = _check_eps(eps)
    values = raw_values(samples, fs.members)
    values = np.clip(values, eps, 1.0 - eps)
    if fs.confidence_encoding == "logit":
        p = values[:, 0]
        values[:, 0] = np.log(p) - np.log1p(-p)
    return values


def build_features(sample: MatchedSample, fs: FeatureSet, eps: float = DEFAULT_CLIP) -> FeatureVector:
    """Feature vector for a single sample; see :func:`build_feature_matrix`."""
    return build_feature_matrix([sample], fs, eps)[0]


def labels(samples: Sequence[MatchedSample]) -> np.ndarray:
    """Binary match labels as an integer vector, one entry per sample."""
    return np.asarray([s.matched for s in samples], dtype=np.int64)
