"""Equidistant fisheye mapping between the upper hemisphere and the image disc.

Image coordinates are continuous ``(u, v)`` with u to the right, v down and the
origin at the top-left pixel corner, so pixel centers sit at half-integers.
Directions are unit ``(x, y, z)`` with z toward the zenith; azimuth 0 lies on
the +u axis and +y maps to +v.

All functions are vectorized over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class OutOfHemisphereError(ValueError):
    pass


class InvalidPixelError(ValueError):
    pass


class AmbiguousArcError(ValueError):
    pass


@dataclass(frozen=True)
class FisheyeProjection:
    resolution: int
    kind: str = "equidistant"

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.kind != "equidistant":
            raise ValueError(f"unsupported projection kind {self.kind!r}")

    @property
    def radius(self) -> float:
        return self.resolution / 2.0

    @property
    def center(self) -> tuple[float, float]:
        return (self.radius, self.radius)

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "FisheyeProjection":
        return cls(int(d["resolution"]), d.get("kind", "equidistant"))


def project(direction, proj: FisheyeProjection) -> np.ndarray:
    """Map hemisphere directions ``(..., 3)`` to pixel coordinates ``(..., 2)``."""
    d = np.asarray(direction, dtype=np.float64)
    if np.any(d[..., 2] < 0):
        raise OutOfHemisphereError("direction below the horizon (z < 0)")
    rho = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(rho, d[..., 2])
    phi = np.arctan2(d[..., 1], d[..., 0])
    r = theta / (math.pi / 2) * proj.radius
    c = proj.radius
    return np.stack([c + r * np.cos(phi), c + r * np.sin(phi)], axis=-1)


def unproject(p, proj: FisheyeProjection, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`project` for points inside the disc."""
    p = np.asarray(p, dtype=np.float64)
    du = p[..., 0] - proj.radius
    dv = p[..., 1] - proj.radius
    r = np.hypot(du, dv)
    if np.any(r > proj.radius * (1.0 + tol)):
        raise InvalidPixelError("pixel coordinate outside the fisheye disc")
    theta = np.minimum(r / proj.radius, 1.0) * (math.pi / 2)
    phi = np.arctan2(dv, du)
    s = np.sin(theta)
    return np.stack([s * np.cos(phi), s * np.sin(phi), np.cos(theta)], axis=-1)


def _slerp(d0: np.ndarray, d1: np.ndarray, s, strict: bool) -> np.ndarray:
    cross = np.cross(d0, d1)
    sin_omega = np.linalg.norm(cross, axis=-1)
    cos_omega = np.sum(d0 * d1, axis=-1)
    omega = np.arctan2(sin_omega, cos_omega)
    antipodal = (sin_omega < 1e-12) & (cos_omega < 0)
    if strict and np.any(antipodal):
        raise AmbiguousArcError("great arc between antipodal directions is undefined")
    s = np.asarray(s, dtype=np.float64)
    small = sin_omega < 1e-12
    safe = np.where(small, 1.0, sin_omega)
    w0 = np.where(small, 1.0 - s, np.sin((1.0 - s) * omega) / safe)
    w1 = np.where(small, s, np.sin(s * omega) / safe)
    out = w0[..., None] * d0 + w1[..., None] * d1
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return out / np.where(norm == 0, 1.0, norm)


def great_arc_interp(d0, d1, s) -> np.ndarray:
    """Point a fraction ``s`` of the way along the great arc from ``d0`` to ``d1``."""
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    return _slerp(d0, d1, s, strict=True)


def angle_between(d0, d1) -> np.ndarray:
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    return np.arctan2(np.linalg.norm(np.cross(d0, d1), axis=-1), np.sum(d0 * d1, axis=-1))


def clamp_to_disc(p, proj: FisheyeProjection) -> tuple[np.ndarray, np.ndarray]:
    """Pull points outside the disc back onto its boundary; returns ``(points, clamped)``."""
    p = np.array(p, dtype=np.float64)
    c = proj.radius
    du = p[..., 0] - c
    dv = p[..., 1] - c
    r = np.hypot(du, dv)
    clamped = r > proj.radius
    scale = np.where(clamped, proj.radius / np.where(r == 0, 1.0, r), 1.0)
    p[..., 0] = c + du * scale
    p[..., 1] = c + dv * scale
    return p, clamped


def displace_on_sphere(p, v, s, proj: FisheyeProjection) -> tuple[np.ndarray, np.ndarray]:
    """Move pixel ``p`` a fraction ``s`` along the great arc toward ``p + v``.

    Targets outside the disc are clamped to its boundary and flagged in the
    second return value. Exactly opposite horizon points fall back to a
    straight image-space step.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    target, clamped = clamp_to_disc(p + v, proj)
    start, _ = clamp_to_disc(p, proj)
    d0 = unproject(start, proj)
    d1 = unproject(target, proj)
    out = project(_slerp(d0, d1, s, strict=False), proj)
    s_arr = np.asarray(s, dtype=np.float64)
    if np.ndim(s_arr) == 0:
        s_arr = np.full(out.shape[:-1], float(s_arr))
    # Exact endpoints avoid round-trip drift.
    still = (s_arr == 0.0) | np.all(v == 0.0, axis=-1)
    out = np.where(still[..., None], start, out)
    out = np.where((s_arr == 1.0)[..., None], target, out)
    sin_omega = np.linalg.norm(np.cross(d0, d1), axis=-1)
    antipodal = (sin_omega < 1e-12) & (np.sum(d0 * d1, axis=-1) < 0)
    if np.any(antipodal):
        lin = start + s_arr[..., None] * (target - start)
        out = np.where(antipodal[..., None], lin, out)
    return out, clamped
