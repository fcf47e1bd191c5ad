"""Global geometry of a condition space: effective rank, feature variance, linear CKA."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import DegenerateInputError, UndefinedCKAError

# singular values below this fraction of the largest are treated as zero
SV_REL_CUTOFF = 1e-10


def _center(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
    return X - X.mean(axis=0, keepdims=True)


def round_half_away(x: float, ndigits: int = 1) -> float:
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def pct_delta(pre: float, post: float) -> float:
    """100 * (post - pre) / pre."""
    if pre == 0:
        raise DegenerateInputError("percentage delta undefined for a zero baseline")
    return 100.0 * (post - pre) / pre


def format_pct(value: float) -> str:
    r = round_half_away(value, 1)
    return f"{r:+.1f}%"


def singular_mass(X) -> np.ndarray:
    """Normalized singular-value distribution p_k of the column-centered matrix."""
    Xc = _center(X)
    if Xc.shape[0] < 2:
        raise DegenerateInputError(f"effective rank needs at least 2 rows, got {Xc.shape[0]}")
    s = np.linalg.svd(Xc, compute_uv=False)
    if s.size == 0 or s[0] <= 1e-12 * np.linalg.norm(np.asarray(X, dtype=np.float64)):
        raise DegenerateInputError("matrix is numerically constant after centering")
    s = s[s >= SV_REL_CUTOFF * s[0]]
    return s / s.sum()


def effective_rank(X) -> float:
    """exp of the Shannon entropy (nats) of the centered singular-value mass."""
    p = singular_mass(X)
    return float(np.exp(-np.sum(p * np.log(p))))


def feature_variance(X) -> float:
    """Mean over entries of squared deviations from the column means."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {X.shape}")
    Xc = X - X.mean(axis=0, keepdims=True)
    return float(np.mean(Xc * Xc))


def linear_cka(X, Y) -> float:
    Xc, Yc = _center(X), _center(Y)
    if Xc.shape[0] != Yc.shape[0]:
        raise ValueError(f"row counts differ: {Xc.shape[0]} vs {Yc.shape[0]}")
    nx, ny = np.linalg.norm(Xc), np.linalg.norm(Yc)
    if nx <= 1e-12 * np.linalg.norm(np.asarray(X, dtype=np.float64)) or ny <= 1e-12 * np.linalg.norm(
        np.asarray(Y, dtype=np.float64)
    ):
        raise UndefinedCKAError("CKA undefined: an operand is zero after centering")
    # scale out magnitudes first; CKA is scale-free and this keeps tiny variances finite
    Xc, Yc = Xc / nx, Yc / ny
    n = Xc.shape[0]
    if n < max(Xc.shape[1], Yc.shape[1]):
        Kx, Ky = Xc @ Xc.T, Yc @ Yc.T
        cross = np.sum(Kx * Ky)
        sx, sy = np.linalg.norm(Kx), np.linalg.norm(Ky)
    else:
        cross = np.linalg.norm(Xc.T @ Yc) ** 2
        sx, sy = np.linalg.norm(Xc.T @ Xc), np.linalg.norm(Yc.T @ Yc)
    return float(cross / (sx * sy))


@dataclass(frozen=True)
class GeometryReport:
    eff_rank_pre: float
    eff_rank_post: float
    eff_rank_delta_pct: float
    var_pre: float
    var_post: float
    var_delta_pct: float
    cka: float

    def display(self) -> dict:
        return {
            "eff_rank_pre": f"{self.eff_rank_pre:.1f}",
            "eff_rank_post": f"{self.eff_rank_post:.1f}",
            "eff_rank_delta": format_pct(self.eff_rank_delta_pct),
            "var_pre": f"{self.var_pre:.2e}",
            "var_post": f"{self.var_post:.2e}",
            "var_delta": format_pct(self.var_delta_pct),
            "cka": f"{self.cka:.3f}",
        }

    def to_dict(self) -> dict:
        return {"values": asdict(self), "display": self.display()}


def geometry_report(pre, post) -> GeometryReport:
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if pre.shape[0] != post.shape[0]:
        raise ValueError(f"pre/post row counts differ: {pre.shape[0]} vs {post.shape[0]}")
    r0, r1 = effective_rank(pre), effective_rank(post)
    v0, v1 = feature_variance(pre), feature_variance(post)
    return GeometryReport(
        eff_rank_pre=r0,
        eff_rank_post=r1,
        eff_rank_delta_pct=pct_delta(r0, r1),
        var_pre=v0,
        var_post=v1,
        var_delta_pct=pct_delta(v0, v1),
        cka=linear_cka(pre, post),
    )
