"""Pinhole intrinsics, perspective projection and crop warping.

Pixel convention: origin at the top-left pixel corner, +u right, +v down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

MIN_DEPTH = 1e-6


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Intrinsics":
        fx, fy, cx, cy = (float(v) for v in a)
        return cls(fx, fy, cx, cy)


@dataclass(frozen=True)
class CropSpec:
    x0: float
    y0: float
    w: float
    h: float
    out: int = 480

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.out > 0):
            raise ValueError(f"invalid crop extent {self}")

    def warp_matrix(self) -> np.ndarray:
        """5x5 matrix K acting on [fx, fy, cx, cy, 1]."""
        sx, sy = self.out / self.w, self.out / self.h
        K = np.diag([sx, sy, sx, sy, 1.0])
        K[2, 4] = -sx * self.x0
        K[3, 4] = -sy * self.y0
        return K

    def warp_points(self, uv: np.ndarray) -> np.ndarray:
        """Map source-image pixels into crop pixels."""
        uv = np.asarray(uv, dtype=np.float64)
        s = np.array([self.out / self.w, self.out / self.h])
        return (uv - np.array([self.x0, self.y0])) * s


def approx_intrinsics(H: float, W: float) -> Intrinsics:
    if H <= 0 or W <= 0:
        raise ValueError("image extent must be positive")
    f = float(max(H, W))
    return Intrinsics(f, f, W / 2.0, H / 2.0)


def apply_warp(K: np.ndarray, C: Intrinsics) -> Intrinsics:
    v = K @ np.append(C.as_array(), 1.0)
    return Intrinsics.from_array(v[:4])


def crop_intrinsics(C: Intrinsics, crop: CropSpec) -> Intrinsics:
    return apply_warp(crop.warp_matrix(), C)


def uncrop_intrinsics(Cc: Intrinsics, crop: CropSpec) -> Intrinsics:
    return apply_warp(np.linalg.inv(crop.warp_matrix()), Cc)


def scale_intrinsics(C, factor: float):
    """Intrinsics for the same view resampled by ``factor`` (e.g. 480 -> 64 px)."""
    return np.asarray(C.as_array() if isinstance(C, Intrinsics) else C, dtype=np.float64) * factor


def project(points, C) -> dc.Value | np.ndarray:
    """Perspective projection of (..., 3) points to (..., 2) pixels.

    ``C`` is an :class:`Intrinsics` or an array [..., 4] broadcastable against
    the leading dimensions of ``points`` (one camera per batch element).  numpy
    in gives numpy out; a :class:`Value` in keeps the gradient path.
    """
    if isinstance(C, Intrinsics):
        C = C.as_array()
    C = np.asarray(C, dtype=np.float64)
    track = isinstance(points, dc.Value)
    P = points if track else dc.Value(points)
    if P.shape[-1] != 3:
        raise dc.ShapeError("project", f"points must have trailing dimension 3, got {P.shape}")
    z = P.data[..., 2]
    if z.size and np.min(z) <= MIN_DEPTH:
        raise BehindCameraError(f"point at depth {np.min(z):.3g} m is behind or at the camera")
    # camera parameters broadcast over the point axis
    f = C[..., None, 0:2] if C.ndim > 1 else C[0:2]
    c = C[..., None, 2:4] if C.ndim > 1 else C[2:4]
    xy = P[..., 0:2]
    zz = P[..., 2:3]
    uv = xy / zz * f + c
    return uv if track else uv.data
