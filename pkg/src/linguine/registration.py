"""
Landmark-based rigid registration.

The fit is the closed-form SVD least-squares solution of Arun, Huang and
Blostein (1987): centre both point sets, take the SVD of the cross-covariance
and build the rotation from the singular vectors, correcting reflections.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, InsufficientLandmarksError, LinguineError

log = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-6
REFLECTION_WARNING = "reflection-corrected"


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray
    rms_residual: float = 0.0
    n_pairs: int = 0
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Map one point ``(3,)`` or many ``(N, 3)`` through ``R @ p + t``."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t, self.rms_residual, self.n_pairs, self.warnings)

    def compose(self, first: RigidTransform) -> RigidTransform:
        """Transform equal to applying ``first`` and then ``self``."""
        return RigidTransform(self.R @ first.R, self.R @ first.t + self.t)

    def rotation_angle_deg(self) -> float:
        cos = (np.trace(self.R) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))

    def to_dict(self) -> dict:
        out = {
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "rms_residual": float(self.rms_residual),
            "n_pairs": int(self.n_pairs),
        }
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        try:
            R = np.asarray(d["R"], dtype=float)
            t = np.asarray(d["t"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise LinguineError(f"malformed transform JSON: {exc}") from exc
        if R.size != 9 or t.size != 3:
            raise LinguineError("transform JSON needs 9 rotation and 3 translation values")
        return cls(R.reshape(3, 3), t, float(d.get("rms_residual", 0.0)), int(d.get("n_pairs", 0)),
                   tuple(d.get("warnings", ())))


def apply(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def rotation_error_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Angle of the relative rotation ``R_a R_b^T``."""
    rel = np.asarray(R_a) @ np.asarray(R_b).T
    cos = (np.trace(rel) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def check_geometry(points: np.ndarray) -> None:
    """Raise if the points are (nearly) collinear or coincident."""
    centred = points - points.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[0] == 0 or (s[1] < COLLINEAR_TOL * s[0] and s[2] < COLLINEAR_TOL * s[0]):
        raise DegenerateGeometryError(f"landmarks are collinear (singular values {s.tolist()})")


def match_landmarks(src, dst) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Pair landmarks by id.

    ``src`` and ``dst`` are iterables of :class:`~linguine.landmarks.Landmark`
    or ``{id: position}`` mappings. Returns the common ids in canonical order
    with the matching ``(N, 3)`` source and destination coordinates.
    """
    from .landmarks import landmark_sort_key

    a = _as_mapping(src)
    b = _as_mapping(dst)
    common = sorted(set(a) & set(b), key=landmark_sort_key)
    if len(common) < 3:
        raise InsufficientLandmarksError(f"need at least 3 common landmarks, found {len(common)}")
    P = np.array([a[i] for i in common], dtype=float)
    Q = np.array([b[i] for i in common], dtype=float)
    check_geometry(P)
    return common, P, Q


def _as_mapping(landmarks) -> dict[str, np.ndarray]:
    if isinstance(landmarks, dict):
        return {str(k): np.asarray(v, dtype=float) for k, v in landmarks.items()}
    return {lm.id: np.asarray(lm.position, dtype=float) for lm in landmarks}


def fit_rigid(P, Q) -> RigidTransform:
    """Least-squares rigid transform taking points ``P`` onto ``Q``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {P.shape} and {Q.shape}")
    if len(P) < 3:
        raise InsufficientLandmarksError(f"need at least 3 point pairs, got {len(P)}")
    check_geometry(P)

    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, S, Vt = np.linalg.svd(H)
    V = Vt.T
    R = V @ U.T
    warnings = ()
    if np.linalg.det(R) < 0:
        # SVD orders singular values descending, so the last column is the smallest
        V[:, 2] = -V[:, 2]
        R = V @ U.T
        if S[2] > COLLINEAR_TOL * S[0]:
            warnings = (REFLECTION_WARNING,)
            log.warning("rigid fit needed a reflection correction with a non-planar configuration")
    t = cq - R @ cp
    residuals = np.linalg.norm(P @ R.T + t - Q, axis=1)
    rms = float(np.sqrt(np.mean(residuals**2)))
    return RigidTransform(R, t, rms, len(P), warnings)


def register_landmarks(src, dst) -> RigidTransform:
    _, P, Q = match_landmarks(src, dst)
    return fit_rigid(P, Q)


def save_transform(T: RigidTransform, path) -> None:
    Path(path).write_text(json.dumps(T.to_dict(), indent=2) + "\n")


def load_transform(path) -> RigidTransform:
    return RigidTransform.from_dict(json.loads(Path(path).read_text()))
