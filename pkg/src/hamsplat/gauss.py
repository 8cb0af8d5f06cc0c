"""Gaussian-primitive data model, quaternion/covariance math, PLY persistence.

Quaternions use the [w, x, y, z] convention.  Scales are stored as
log-scales and opacity as a logit so the activated values are positive /
bounded by construction.  Each primitive also carries its spatial and
temporal equilibrium state used by the Boltzmann masks.

The on-disk format is binary little-endian PLY with the usual splat
property names (x, y, z, scale_0..2, rot_0..3, opacity, f_dc_0..2) plus
five extension fields (eq_x, eq_y, eq_z, eq_t_pos, eq_t_scale); see
README for the byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# spherical-harmonics DC normalization used by the f_dc_* fields
SH_C0 = 0.28209479177387814

EQ_T_DEFAULT = 0.5


class PlyError(Exception):
    """Malformed PLY input; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class QuaternionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternion math
# ---------------------------------------------------------------------------

def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b, [w, x, y, z] convention."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= 1e-12:
        raise QuaternionError(f"cannot normalize near-zero quaternion (norm={n:g})")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (proper rotation, det +1)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance(s, rot) -> np.ndarray:
    """3D covariance R diag(s) diag(s) R^T of a scaled, rotated ellipsoid."""
    s = np.asarray(s, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    n = np.linalg.norm(rot)
    if abs(n - 1.0) > 1e-4:
        raise QuaternionError(f"covariance expects a unit quaternion (norm={n:g})")
    r = quat_to_rotmat(rot)
    return (r * s[None, :] ** 2) @ r.T


# Batched tape variants (used by the differentiable deformation/render path).

def quat_normalize_batch(q: ad.Tensor) -> ad.Tensor:
    """Row-normalize a (N, 4) quaternion tensor on the tape."""
    n = ad.sqrt(ad.tsum(ad.mul(q, q), axis=1, keepdims=True))
    return ad.div(q, n)


def quat_mul_batch(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Rowwise Hamilton product of (N, 4) tensors on the tape."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    comps = [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
    return ad.concat([ad.reshape(c, (-1, 1)) for c in comps], axis=1)


def rotmat_from_quat_batch(q: ad.Tensor) -> ad.Tensor:
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices on the tape."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    one = ad.ones(w.shape)
    cols = [
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), one - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), one - 2.0 * (x * x + y * y),
    ]
    flat = ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)
    return ad.reshape(flat, (-1, 3, 3))


# ---------------------------------------------------------------------------
# primitives and scenes
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One anisotropic splat plus its equilibrium state."""

    mu: np.ndarray                      # (3,) position, scene units
    log_scale: np.ndarray               # (3,), scale = exp(log_scale)
    rot: np.ndarray                     # (4,) unit quaternion [w, x, y, z]
    opacity_logit: float                # alpha = sigmoid(opacity_logit)
    color: np.ndarray                   # (3,) RGB in [0, 1]
    mu_eq: np.ndarray = None            # (3,) spatial equilibrium
    t_eq_pos: float = EQ_T_DEFAULT      # temporal equilibrium (position mask)
    t_eq_scale: float = EQ_T_DEFAULT    # temporal equilibrium (scale mask)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.mu_eq is None:
            self.mu_eq = self.mu.copy()
        else:
            self.mu_eq = np.asarray(self.mu_eq, dtype=np.float64)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def normalize(self, p: np.ndarray) -> np.ndarray:
        return (p - self.lo) / (self.hi - self.lo)


_FIELD_SPECS = [
    ("mu", ("x", "y", "z")),
    ("log_scale", ("scale_0", "scale_1", "scale_2")),
    ("rot", ("rot_0", "rot_1", "rot_2", "rot_3")),
    ("opacity_logit", ("opacity",)),
    ("color", ("f_dc_0", "f_dc_1", "f_dc_2")),
    ("mu_eq", ("eq_x", "eq_y", "eq_z")),
    ("t_eq_pos", ("eq_t_pos",)),
    ("t_eq_scale", ("eq_t_scale",)),
]
ARRAY_FIELDS = [name for name, _ in _FIELD_SPECS]
_EQ_FIELDS = {"eq_x", "eq_y", "eq_z", "eq_t_pos", "eq_t_scale"}


@dataclass
class Scene:
    """An ordered collection of primitives plus the normalization box."""

    primitives: list
    bounds: Aabb = None

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = bounds_of(self.primitives)

    def __len__(self):
        return len(self.primitives)

    def as_arrays(self) -> dict:
        """Stack per-primitive attributes into a dict of float64 arrays."""
        n = len(self.primitives)
        out = {
            "mu": np.zeros((n, 3)), "log_scale": np.zeros((n, 3)),
            "rot": np.zeros((n, 4)), "opacity_logit": np.zeros(n),
            "color": np.zeros((n, 3)), "mu_eq": np.zeros((n, 3)),
            "t_eq_pos": np.zeros(n), "t_eq_scale": np.zeros(n),
        }
        for i, p in enumerate(self.primitives):
            out["mu"][i] = p.mu
            out["log_scale"][i] = p.log_scale
            out["rot"][i] = p.rot
            out["opacity_logit"][i] = p.opacity_logit
            out["color"][i] = p.color
            out["mu_eq"][i] = p.mu_eq
            out["t_eq_pos"][i] = p.t_eq_pos
            out["t_eq_scale"][i] = p.t_eq_scale
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, bounds: Aabb) -> "Scene":
        n = arrays["mu"].shape[0]
        prims = [GaussianPrimitive(
            mu=arrays["mu"][i], log_scale=arrays["log_scale"][i],
            rot=arrays["rot"][i], opacity_logit=float(arrays["opacity_logit"][i]),
            color=arrays["color"][i], mu_eq=arrays["mu_eq"][i],
            t_eq_pos=float(arrays["t_eq_pos"][i]),
            t_eq_scale=float(arrays["t_eq_scale"][i]),
        ) for i in range(n)]
        return cls(prims, bounds)


def bounds_of(primitives, pad: float = 0.05) -> Aabb:
    """Axis-aligned box around the primitive positions with relative padding."""
    if not primitives:
        return Aabb(np.zeros(3), np.ones(3))
    mus = np.stack([p.mu for p in primitives])
    lo, hi = mus.min(axis=0), mus.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return Aabb(lo - pad * span, hi + pad * span)


# ---------------------------------------------------------------------------
# PLY I/O
# ---------------------------------------------------------------------------

_PLY_PROPS = [name for _, names in _FIELD_SPECS for name in names]


def ply_bytes(scene: Scene) -> bytes:
    """Serialize the scene as binary little-endian PLY (float32 storage)."""
    arrays = scene.as_arrays()
    n = len(scene)
    if n:
        cols = []
        for fname, props in _FIELD_SPECS:
            a = arrays[fname]
            a = a.reshape(n, -1) if a.ndim > 1 else a.reshape(n, 1)
            if fname == "color":
                a = (a - 0.5) / SH_C0
            cols.append(a)
        table = np.concatenate(cols, axis=1).astype("<f4")
    else:
        table = np.zeros((0, len(_PLY_PROPS)), "<f4")

    b = scene.bounds
    header_lines = ["ply", "format binary_little_endian 1.0",
                    "comment bounds " + " ".join(f"{v:.17g}" for v in np.concatenate([b.lo, b.hi])),
                    f"element vertex {n}"]
    header_lines += [f"property float {p}" for p in _PLY_PROPS]
    header_lines.append("end_header")
    return ("\n".join(header_lines) + "\n").encode("ascii") + table.tobytes()


def save_ply(scene: Scene, path) -> None:
    with open(path, "wb") as f:
        f.write(ply_bytes(scene))


def load_ply(path) -> Scene:
    """Read a splat PLY; missing eq_* fields fall back to documented defaults."""
    with open(path, "rb") as f:
        raw = f.read()

    end_tag = b"end_header\n"
    end = raw.find(end_tag)
    if not raw.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file (missing 'ply'/'end_header')", 0)
    body_start = end + len(end_tag)
    header = raw[:end].decode("ascii", errors="replace")

    n_vertex = None
    props: list[str] = []
    bounds = None
    offset = 0
    for line in header.splitlines():
        stripped = line.strip()
        if stripped.startswith("format"):
            if "binary_little_endian" not in stripped:
                raise PlyError(f"unsupported format {stripped!r}", offset)
        elif stripped.startswith("comment bounds"):
            vals = [float(v) for v in stripped.split()[2:]]
            if len(vals) == 6:
                bounds = Aabb(np.array(vals[:3]), np.array(vals[3:]))
        elif stripped.startswith("element"):
            parts = stripped.split()
            if parts[1] != "vertex":
                raise PlyError(f"unsupported element {parts[1]!r}", offset)
            n_vertex = int(parts[2])
        elif stripped.startswith("property"):
            parts = stripped.split()
            if parts[1] != "float":
                raise PlyError(f"unsupported property type {parts[1]!r}", offset)
            props.append(parts[2])
        offset += len(line) + 1
    if n_vertex is None:
        raise PlyError("header missing 'element vertex'", end)

    stride = 4 * len(props)
    body = raw[body_start:]
    if len(body) != n_vertex * stride:
        raise PlyError(
            f"payload holds {len(body)} bytes, expected {n_vertex * stride} "
            f"({n_vertex} vertices x {stride} bytes)", body_start + min(len(body), n_vertex * stride))
    table = np.frombuffer(body, dtype="<f4").reshape(n_vertex, len(props)).astype(np.float64)
    col = {p: table[:, i] for i, p in enumerate(props)}

    missing = [p for p in _PLY_PROPS if p not in col and p not in _EQ_FIELDS]
    if missing:
        raise PlyError(f"missing required properties {missing}", body_start)

    def stack(names):
        return np.stack([col[nm] for nm in names], axis=1)

    arrays = {
        "mu": stack(("x", "y", "z")),
        "log_scale": stack(("scale_0", "scale_1", "scale_2")),
        "rot": stack(("rot_0", "rot_1", "rot_2", "rot_3")),
        "opacity_logit": col["opacity"],
        "color": stack(("f_dc_0", "f_dc_1", "f_dc_2")) * SH_C0 + 0.5,
    }
    if "eq_x" in col:
        arrays["mu_eq"] = stack(("eq_x", "eq_y", "eq_z"))
    else:
        arrays["mu_eq"] = arrays["mu"].copy()
    arrays["t_eq_pos"] = col.get("eq_t_pos", np.full(n_vertex, EQ_T_DEFAULT))
    arrays["t_eq_scale"] = col.get("eq_t_scale", np.full(n_vertex, EQ_T_DEFAULT))

    if bounds is None:
        scene = Scene.from_arrays(arrays, Aabb(np.zeros(3), np.ones(3)))
        scene.bounds = bounds_of(scene.primitives)
        return scene
    return Scene.from_arrays(arrays, bounds)
