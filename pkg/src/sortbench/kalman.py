"""Constant-velocity Kalman filter over bounding-box state.

State ``x = [cx, cy, s, r, vcx, vcy, vs]`` where ``s`` is box area and ``r``
the aspect ratio (held constant). Observations are ``z = [cx, cy, s, r]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .boxes import BBox, InvalidBoxError, InvalidStateError, bbox_to_z, x_to_bbox
from .smallmat import (
    DecompositionError,
    inverse_spd_into,
    jit,
    matmul_into,
    matmul_nt_into,
    matvec_into,
    symmetrize_inplace,
)

__all__ = [
    "BBox",
    "FilterDivergence",
    "InvalidBoxError",
    "InvalidStateError",
    "KalmanModel",
    "KalmanState",
    "WORKSPACE_LEN",
    "allocate_workspace",
    "bbox_to_z",
    "predict",
    "update",
    "x_to_bbox",
]

DIM_X = 7
DIM_Z = 4

P0_DIAG = (10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4)
Q_DIAG = (1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4)
R_DIAG = (1.0, 1.0, 10.0, 10.0)


class FilterDivergence(DecompositionError):
    """Innovation covariance lost positive definiteness."""


def _transition() -> np.ndarray:
    F = np.eye(DIM_X)
    F[0, 4] = F[1, 5] = F[2, 6] = 1.0
    return F


def _observation() -> np.ndarray:
    H = np.zeros((DIM_Z, DIM_X))
    H[:, :DIM_Z] = np.eye(DIM_Z)
    return H


def _psd(a: np.ndarray, name: str) -> None:
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(a).min() < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True, eq=False)
class KalmanModel:
    """Immutable model matrices; safe to share between threads."""

    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    B: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {"F": (7, 7), "H": (4, 7), "Q": (7, 7), "R": (4, 4)}
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must be {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _psd(self.Q, "Q")
        _psd(self.R, "R")
        if (self.B is None) != (self.u is None):
            raise ValueError("B and u must be given together")
        if self.B is not None:
            B = np.ascontiguousarray(self.B, dtype=np.float64)
            u = np.ascontiguousarray(self.u, dtype=np.float64)
            if B.shape != (7, 4) or u.shape != (4,):
                raise ValueError("B must be 7x4 and u length 4")
            object.__setattr__(self, "B", B)
            object.__setattr__(self, "u", u)
        bu = np.zeros(DIM_X) if self.B is None else self.B @ self.u
        bu.setflags(write=False)
        object.__setattr__(self, "_bu", bu)

    @classmethod
    def constant_velocity(cls, q_diag=Q_DIAG, r_diag=R_DIAG, B=None, u=None) -> "KalmanModel":
        return cls(_transition(), _observation(), np.diag(q_diag), np.diag(r_diag), B, u)

    @property
    def has_control(self) -> bool:
        return self.B is not None

    @property
    def control(self) -> np.ndarray:
        """B @ u, or zeros when no control input is configured."""
        return self._bu


@dataclass
class KalmanState:
    x: np.ndarray
    P: np.ndarray

    @classmethod
    def from_observation(cls, z, p0_diag=P0_DIAG) -> "KalmanState":
        x = np.zeros(DIM_X)
        x[:DIM_Z] = z
        return cls(x, np.diag(np.asarray(p0_diag, dtype=np.float64)))

    @classmethod
    def from_bbox(cls, b: BBox, p0_diag=P0_DIAG) -> "KalmanState":
        return cls.from_observation(bbox_to_z(b), p0_diag)

    def copy(self) -> "KalmanState":
        return KalmanState(np.array(self.x, dtype=np.float64), np.array(self.P, dtype=np.float64))

    def bbox(self) -> BBox:
        return x_to_bbox(self.x)


# Flat scratch layout: one float64 buffer per worker, sliced into views
# inside the kernels (a single array argument keeps dispatch cheap).
_XT = 0
_HX = _XT + DIM_X
_Y = _HX + DIM_Z
_FP = _Y + DIM_Z
_PHT = _FP + DIM_X * DIM_X
_S = _PHT + DIM_X * DIM_Z
_L = _S + DIM_Z * DIM_Z
_SINV = _L + DIM_Z * DIM_Z
_K = _SINV + DIM_Z * DIM_Z
_KPH = _K + DIM_X * DIM_Z
WORKSPACE_LEN = _KPH + DIM_X * DIM_X


def allocate_workspace() -> np.ndarray:
    """Scratch for one in-flight predict/update; allocate one per worker."""
    return np.empty(WORKSPACE_LEN)


@jit
def predict_inplace(x, P, F, Q, bu, ws):
    # keep the area positive: a shrinking box must not cross zero
    if x[2] + x[6] <= 0.0:
        x[6] = 0.0
    nx = x.shape[0]
    xt = ws[_XT:_XT + DIM_X]
    FP = ws[_FP:_FP + DIM_X * DIM_X].reshape((DIM_X, DIM_X))
    matvec_into(F, x, xt)
    for i in range(nx):
        x[i] = xt[i] + bu[i]
    matmul_into(F, P, FP)
    matmul_nt_into(FP, F, P)
    for i in range(nx):
        for j in range(nx):
            P[i, j] += Q[i, j]
    symmetrize_inplace(P)


@jit
def update_inplace(x, P, H, R, z, ws):
    """Fuse measurement z into (x, P). Returns False if S is not SPD.

    Uses P' = P - K (P H^T)^T, which equals (I - K H) P for symmetric P.
    """
    nz = DIM_Z
    nx = DIM_X
    hx = ws[_HX:_HX + DIM_Z]
    y = ws[_Y:_Y + DIM_Z]
    PHt = ws[_PHT:_PHT + DIM_X * DIM_Z].reshape((DIM_X, DIM_Z))
    S = ws[_S:_S + DIM_Z * DIM_Z].reshape((DIM_Z, DIM_Z))
    L = ws[_L:_L + DIM_Z * DIM_Z].reshape((DIM_Z, DIM_Z))
    Sinv = ws[_SINV:_SINV + DIM_Z * DIM_Z].reshape((DIM_Z, DIM_Z))
    K = ws[_K:_K + DIM_X * DIM_Z].reshape((DIM_X, DIM_Z))
    KPH = ws[_KPH:_KPH + DIM_X * DIM_X].reshape((DIM_X, DIM_X))
    matvec_into(H, x, hx)
    for i in range(nz):
        y[i] = z[i] - hx[i]
    matmul_nt_into(P, H, PHt)
    matmul_into(H, PHt, S)
    for i in range(nz):
        for j in range(nz):
            S[i, j] += R[i, j]
    symmetrize_inplace(S)
    if not inverse_spd_into(S, Sinv, L):
        return False
    matmul_into(PHt, Sinv, K)
    for i in range(nx):
        s = 0.0
        for j in range(nz):
            s += K[i, j] * y[j]
        x[i] += s
    matmul_nt_into(K, PHt, KPH)
    for i in range(nx):
        for j in range(nx):
            P[i, j] -= KPH[i, j]
    symmetrize_inplace(P)
    return True


def predict(st: KalmanState, m: KalmanModel, ws: Optional[np.ndarray] = None) -> KalmanState:
    """Propagate the state one frame: x' = F x (+ B u), P' = F P F^T + Q."""
    out = st.copy()
    predict_inplace(out.x, out.P, m.F, m.Q, m.control, allocate_workspace() if ws is None else ws)
    return out


def update(st: KalmanState, m: KalmanModel, z, ws: Optional[np.ndarray] = None) -> KalmanState:
    """Correct the state with observation ``z = [cx, cy, s, r]``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.shape != (DIM_Z,):
        raise ValueError(f"observation must have length {DIM_Z}")
    out = st.copy()
    if not update_inplace(out.x, out.P, m.H, m.R, z, allocate_workspace() if ws is None else ws):
        raise FilterDivergence("innovation covariance is not positive definite")
    return out
