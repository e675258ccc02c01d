"""Rigid-body math: quaternions, SE(3), dual quaternions, and blend skinning.

Conventions (stated once, inherited by every file format and module):

- Quaternions are ``(w, x, y, z)``, right-handed, z-up world, units meters.
- All functions accept leading batch dimensions: a quaternion array has shape
  ``(..., 4)``, a point array ``(..., 3)``.
- Blending of rigid transforms happens in dual-quaternion space so that the
  blended transform is itself rigid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input (non-finite, non-unit, degenerate)."""


# ---------------------------------------------------------------------------
# Quaternion primitives (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, batched over leading dims."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise GeometryError("zero-norm quaternion")
    return q / n


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by unit quaternions q (batched)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, numerically robust (Shepperd)."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    q = np.empty((m.shape[0], 4))
    for i, r in enumerate(m):
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] >= r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    # canonical hemisphere: w >= 0
    q = np.where(q[..., :1] < 0, -q, q)
    return q.reshape(batch + (4,))


def axis_angle_to_quat(rotvec: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector (axis * radians) to unit quaternion."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta[..., 0] < 1e-8
    # sin(theta/2)/theta with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(theta > 0, np.sin(half) / np.where(theta > 0, theta, 1.0), 0.5)
    k = np.where(small[..., None], 0.5 - theta**2 / 48.0, k)
    w = np.cos(half)
    return np.concatenate([w, k * rotvec], axis=-1)


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to canonical axis-angle (angle in [0, pi])."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s[..., 0], q[..., 0])[..., None]
    small = s[..., 0] < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(s > 0, angle / np.where(s > 0, s, 1.0), 2.0)
    scale = np.where(small[..., None], 2.0, scale)
    return scale * q[..., 1:]


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def rotation_geodesic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic distance (radians, in [0, pi]) between unit quaternions.

    Equals arccos((trace(Ra^T Rb) - 1) / 2), sign-invariant in either input.
    The arccos argument is clipped to [-1, 1] for safety at 0 and pi.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise GeometryError("zero-norm quaternion")
    dot = np.abs(np.sum(a * b, axis=-1) / (na * nb))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SE3:
    """Rigid transform: unit quaternion ``q`` (..., 4) plus translation ``t`` (..., 3).

    Supports arbitrary leading batch dimensions shared by ``q`` and ``t``.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if q.shape[-1] != 4 or t.shape[-1] != 3 or q.shape[:-1] != t.shape[:-1]:
            raise GeometryError(f"bad SE3 shapes {q.shape} / {t.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite SE3 input")
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(np.abs(n - 1.0) > QUAT_NORM_TOL):
            raise GeometryError("quaternion norm deviates from 1 beyond tolerance")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", t)

    @property
    def shape(self):
        return self.q.shape[:-1]

    @classmethod
    def identity(cls, shape=()) -> "SE3":
        q = np.zeros(tuple(shape) + (4,))
        q[..., 0] = 1.0
        return cls(q, np.zeros(tuple(shape) + (3,)))

    @classmethod
    def from_parts(cls, q, t) -> "SE3":
        return cls(np.asarray(q, dtype=float), np.asarray(t, dtype=float))

    @classmethod
    def random(cls, rng: np.random.Generator, shape=()) -> "SE3":
        q = rng.normal(size=tuple(shape) + (4,))
        q = quat_normalize(q)
        t = rng.uniform(-2.0, 2.0, size=tuple(shape) + (3,))
        return cls(q, t)

    def compose(self, other: "SE3") -> "SE3":
        """self then-applied-after other: result maps x -> self(other(x))."""
        q = quat_normalize(quat_mul(self.q, other.q))
        t = quat_rotate(self.q, other.t) + self.t
        return SE3(q, t)

    def inverse(self) -> "SE3":
        qi = quat_conj(self.q)
        return SE3(qi, -quat_rotate(qi, self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(points, dtype=float)) + self.t

    def to_matrix(self) -> np.ndarray:
        m = np.zeros(self.shape + (4, 4))
        m[..., :3, :3] = quat_to_matrix(self.q)
        m[..., :3, 3] = self.t
        m[..., 3, 3] = 1.0
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE3":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[..., :3, :3]), m[..., :3, 3])

    def log6(self) -> np.ndarray:
        """Decoupled 6-vector chart: (axis-angle of rotation, translation)."""
        return np.concatenate([quat_to_axis_angle(self.q), self.t], axis=-1)

    @classmethod
    def from_log6(cls, v: np.ndarray) -> "SE3":
        v = np.asarray(v, dtype=float)
        return cls(axis_angle_to_quat(v[..., :3]), v[..., 3:])

    def __getitem__(self, idx) -> "SE3":
        return SE3(self.q[idx], self.t[idx])

    def allclose(self, other: "SE3", atol: float = 1e-9) -> bool:
        dq = np.minimum(
            np.linalg.norm(self.q - other.q, axis=-1),
            np.linalg.norm(self.q + other.q, axis=-1),
        )
        return bool(np.all(dq <= atol) and np.all(np.abs(self.t - other.t) <= atol))


def se3_compose(a: SE3, b: SE3) -> SE3:
    """Composition applying b first, then a."""
    return a.compose(b)


def se3_inverse(a: SE3) -> SE3:
    return a.inverse()


# ---------------------------------------------------------------------------
# Dual quaternions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DualQuat:
    """Dual quaternion (real, dual), each (..., 4)."""

    real: np.ndarray
    dual: np.ndarray

    @classmethod
    def from_se3(cls, x: SE3) -> "DualQuat":
        tq = np.concatenate([np.zeros(x.shape + (1,)), x.t], axis=-1)
        return cls(x.q, 0.5 * quat_mul(tq, x.q))

    def normalized(self) -> "DualQuat":
        """Unit real part and real . dual = 0 (projects to a valid rigid DQ)."""
        n = np.linalg.norm(self.real, axis=-1, keepdims=True)
        if np.any(n < 1e-12):
            raise GeometryError("degenerate dual quaternion (zero real part)")
        r = self.real / n
        d = self.dual / n
        d = d - r * np.sum(r * d, axis=-1, keepdims=True)
        return DualQuat(r, d)

    def to_se3(self) -> SE3:
        nq = self.normalized()
        t = 2.0 * quat_mul(nq.dual, quat_conj(nq.real))[..., 1:]
        return SE3(nq.real, t)


def dq_blend(weights: np.ndarray, transforms: SE3) -> SE3:
    """Weighted dual-quaternion blend of bone transforms (..., B) x SE3[..., B].

    Linear blend with antipodal sign correction: every dual quaternion is
    flipped into the hemisphere of the largest-weight bone before summing,
    then the sum is renormalized. The result is always a valid rigid
    transform.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != transforms.shape:
        raise GeometryError(f"weight/transform length mismatch: {weights.shape} vs {transforms.shape}")
    dq = DualQuat.from_se3(transforms)
    ref_idx = np.argmax(weights, axis=-1)
    ref = np.take_along_axis(dq.real, ref_idx[..., None, None], axis=-2)[..., 0, :]
    sign = np.sign(np.sum(dq.real * ref[..., None, :], axis=-1, keepdims=True))
    sign = np.where(sign == 0, 1.0, sign)
    w = weights[..., None] * sign
    blended = DualQuat(np.sum(w * dq.real, axis=-2), np.sum(w * dq.dual, axis=-2))
    return blended.to_se3()


# ---------------------------------------------------------------------------
# Bones and skinning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoneSet:
    """Oriented Gaussian bones: centers (B, 3), orientations (B, 4), scales (B, 3).

    Centers and orientations may vary over time; scales are constant per agent.
    """

    centers: np.ndarray
    orientations: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        q = np.asarray(self.orientations, dtype=float)
        s = np.asarray(self.scales, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3 or q.shape != (c.shape[0], 4) or s.shape != c.shape:
            raise GeometryError("inconsistent bone array shapes")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
            raise GeometryError("non-finite bone data")
        if np.any(s <= 0):
            raise GeometryError("degenerate bone: scales must be strictly positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "orientations", quat_normalize(q))
        object.__setattr__(self, "scales", s)

    @property
    def count(self) -> int:
        return self.centers.shape[0]


def skinning_weights(x: np.ndarray, bones: BoneSet, temperature: float = 1.0) -> np.ndarray:
    """Probability of assigning point(s) x to each bone.

    Softmax over bones of minus the squared Mahalanobis distance under each
    bone's oriented scales. Batched: x (..., 3) -> weights (..., B).
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise GeometryError("non-finite query point")
    if temperature <= 0:
        raise GeometryError("temperature must be positive")
    rel = x[..., None, :] - bones.centers  # (..., B, 3)
    local = quat_rotate(quat_conj(bones.orientations), rel)
    d2 = np.sum((local / bones.scales) ** 2, axis=-1)
    logits = -d2 / temperature
    logits = logits - np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / np.sum(w, axis=-1, keepdims=True)


def blend_transform(weights: np.ndarray, bone_transforms: SE3) -> SE3:
    """Blended rigid transform under skinning weights (companion to blend_skinning)."""
    return dq_blend(weights, bone_transforms)


def blend_skinning(x: np.ndarray, weights: np.ndarray, bone_transforms: SE3) -> np.ndarray:
    """Map point(s) through the weighted dual-quaternion blend of bone transforms.

    x (..., 3), weights (..., B), bone_transforms SE3 batched (..., B).
    """
    return blend_transform(weights, bone_transforms).apply(np.asarray(x, dtype=float))


def kabsch_fit(source: np.ndarray, target: np.ndarray) -> SE3:
    """Best-fit rigid transform mapping source points onto target points.

    source/target: (..., N, 3). Least-squares over rotations and translation
    (Kabsch). Used to derive a root frame from a bone-center cloud.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    sc = source.mean(axis=-2, keepdims=True)
    tc = target.mean(axis=-2, keepdims=True)
    h = np.swapaxes(source - sc, -1, -2) @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    flip = np.ones(h.shape[:-2] + (3,))
    flip[..., 2] = d
    r = np.swapaxes(vt, -1, -2) @ (flip[..., :, None] * np.swapaxes(u, -1, -2))
    q = matrix_to_quat(r)
    t = tc[..., 0, :] - quat_rotate(q, sc[..., 0, :])
    return SE3(q, t)
