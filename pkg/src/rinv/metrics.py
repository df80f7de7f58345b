"""Point-set distances between an enhanced cloud and its reference.

All four scores come from the two directed mean nearest-neighbour
distances ``d_pg`` (prediction to ground truth) and ``d_gp``:
``cd = d_pg + d_gp``, ``mhd = max(d_pg, d_gp)``, ``ucd = d_pg``, ``umhd = d_gp``.
Distances are Euclidean, in meters, not squared.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricUndefinedError
from .grid import PointSet

METRIC_FIELDS = ("cd", "ucd", "mhd", "umhd", "n_pred", "n_gt")


@dataclass(frozen=True)
class MetricsReport:
    cd: float
    ucd: float
    mhd: float
    umhd: float
    n_pred: int
    n_gt: int

    def as_dict(self) -> dict:
        return asdict(self)


def _coords(p) -> np.ndarray:
    return p.points if isinstance(p, PointSet) else np.asarray(p, dtype=float).reshape(-1, 2)


def directed_mean_nn(a, b) -> float:
    """Mean over ``a`` of the distance to the nearest point of ``b``."""
    A, B = _coords(a), _coords(b)
    if len(A) == 0 or len(B) == 0:
        raise MetricUndefinedError(
            f"nearest-neighbour distance undefined for empty set (|A|={len(A)}, |B|={len(B)})"
        )
    d, _ = cKDTree(B).query(A, k=1)
    return float(np.mean(d))


def compute_metrics(pred, gt) -> MetricsReport:
    P, G = _coords(pred), _coords(gt)
    if len(P) == 0 or len(G) == 0:
        raise MetricUndefinedError(
            f"metrics undefined: prediction has {len(P)} points, ground truth has {len(G)}"
        )
    d_pg = directed_mean_nn(P, G)
    d_gp = directed_mean_nn(G, P)
    return MetricsReport(
        cd=d_pg + d_gp, ucd=d_pg, mhd=max(d_pg, d_gp), umhd=d_gp, n_pred=len(P), n_gt=len(G)
    )


def chamfer(pred, gt) -> float:
    return compute_metrics(pred, gt).cd
