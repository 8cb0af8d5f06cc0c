"""Physics-informed constraints: position Verlet and rotation clamping.

The position update is one second-order symplectic step

    mu~ = mu + dt * v + (dt^2 / 2) * F

from the canonical position, using the decoder's predicted velocity and the
conservative force.  Rotation increments are limited through a smooth
angle clamp phi' = phi_max * tanh(phi / phi_max) that preserves the rotation
axis and leaves small rotations untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gauss import quat_mul, quat_normalize, quat_mul_batch, quat_normalize_batch

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class IntegratorConfig:
    dt: float = 0.05
    phi_max: float = 0.35

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0.0 < self.phi_max <= np.pi):
            raise ValueError("phi_max must lie in (0, pi]")


def verlet_position(mu, velocity, force, dt: float) -> ad.Tensor:
    """mu + dt*velocity + (dt^2/2)*force; affine in (velocity, force)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    mu = ad.as_tensor(mu)
    velocity = ad.as_tensor(velocity)
    force = ad.as_tensor(force)
    return mu + dt * velocity + (0.5 * dt * dt) * force


def clamp_rotation(dr, phi_max: float) -> np.ndarray:
    """Clamp one quaternion increment to a rotation angle below phi_max.

    The increment is decomposed as [dw, dg]; the angle
    phi = 2 atan2(||dg||, dw) is squashed through phi_max * tanh(phi/phi_max)
    and the unit increment rebuilt around the same axis.  A vanishing vector
    part (||dg|| < 1e-9) is a pure-identity increment.
    """
    dr = np.asarray(dr, dtype=np.float64)
    if dr.shape != (4,):
        raise ValueError(f"quaternion increment must have shape (4,), got {dr.shape}")
    if np.linalg.norm(dr) <= 1e-12:
        raise ValueError("zero quaternion increment has no defined rotation")
    dw, dg = dr[0], dr[1:]
    ng = np.linalg.norm(dg)
    if ng < 1e-9:
        return IDENTITY_QUAT.copy()
    phi = 2.0 * np.arctan2(ng, dw)
    phi_c = phi_max * np.tanh(phi / phi_max)
    axis = dg / ng
    return np.concatenate([[np.cos(phi_c / 2.0)], np.sin(phi_c / 2.0) * axis])


def rotation_angle(q) -> float:
    """Rotation angle of a quaternion, 2*atan2(||vec||, w)."""
    q = np.asarray(q, dtype=np.float64)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), q[0]))


def apply_rotation(r, dr) -> np.ndarray:
    """normalize(r ⊗ dr): compose the clamped increment onto the rotation."""
    r = np.asarray(r, dtype=np.float64)
    dr = np.asarray(dr, dtype=np.float64)
    for name, q in (("r", r), ("dr", dr)):
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-4:
            raise ValueError(f"apply_rotation expects unit quaternions; ||{name}|| = {n:g}")
    return quat_normalize(quat_mul(r, dr))


# ---------------------------------------------------------------------------
# batched tape variants used inside training
# ---------------------------------------------------------------------------

def clamp_rotation_batch(dr: ad.Tensor, phi_max: float) -> ad.Tensor:
    """Rowwise angle clamp of (N, 4) increments on the tape.

    Rows with a vanishing vector part (including the all-zero increment a
    freshly initialized adapter produces) map to the identity increment and
    pass no gradient, matching the scalar operation's dead zone.
    """
    dr = ad.as_tensor(dr)
    dw = dr[:, 0]
    dg = dr[:, 1:]
    ssq = ad.tsum(dg * dg, axis=1)
    live = (ssq.data > 1e-18).astype(np.float64)
    dead = ad.constant(1.0 - live)
    live = ad.constant(live)
    # dead rows get a benign norm of 1 so the formula stays finite everywhere
    ng = ad.sqrt(ssq * live + dead)
    phi = 2.0 * ad.atan2(ng, dw)
    phi_c = phi_max * ad.tanh(phi * (1.0 / phi_max))
    half = 0.5 * phi_c
    axis = dg / ad.reshape(ng, (-1, 1))
    w_out = ad.cos(half) * live + dead
    vec_out = ad.sin(half).reshape((-1, 1)) * axis * live.reshape((-1, 1))
    return ad.concat([ad.reshape(w_out, (-1, 1)), vec_out], axis=1)


def apply_rotation_batch(r: ad.Tensor, dr: ad.Tensor) -> ad.Tensor:
    """Rowwise normalize(r ⊗ dr) on the tape."""
    return quat_normalize_batch(quat_mul_batch(r, dr))
