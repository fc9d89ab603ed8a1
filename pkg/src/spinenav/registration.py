"""Patient-image registration: rigid point fits, surface ICP, and the
FLE/FRE/TRE statistics used to verify them.

register_points solves the closed-form least-squares rigid fit (centroid
removal, cross-covariance SVD, reflection correction). predict_tre evaluates
the expected target registration error

    E[TRE^2(r)] = (FLE^2 / N) * (1 + (1/3) * sum_k d_k^2 / f_k^2)

where f_k is the RMS distance of the fiducials from principal axis k of the
fiducial configuration and d_k is the distance of the target from that axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, LabelMismatch, TooFewPoints
from .geom import (
    RigidTransform,
    _orthonormality_residual,
    _polar_orthonormalize,
    transform_from_dict,
    transform_to_dict,
)

_COLLINEAR_SV_RATIO = 1e-6


@dataclass(frozen=True)
class FiducialSet:
    """Labeled 3D points (mm) expressed in a named frame."""

    frame: str
    labels: tuple
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        pts = np.array(self.points, dtype=float).reshape(len(labels), 3)
        if len(labels) == 0:
            raise ValueError("fiducial set needs at least one point")
        if len(set(labels)) != len(labels):
            raise ValueError("fiducial labels must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("fiducial positions must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "points", pts)

    @staticmethod
    def from_pairs(frame: str, pairs) -> "FiducialSet":
        """Build from an iterable of (label, xyz_mm)."""
        labels = [p[0] for p in pairs]
        points = [p[1] for p in pairs]
        return FiducialSet(frame, tuple(labels), np.asarray(points, dtype=float))

    def __len__(self) -> int:
        return len(self.labels)

    def position(self, label: str) -> np.ndarray:
        return self.points[self.labels.index(label)]

    def subset(self, labels) -> "FiducialSet":
        idx = [self.labels.index(l) for l in labels]
        return FiducialSet(self.frame, tuple(self.labels[i] for i in idx), self.points[idx])

    def transformed(self, t: RigidTransform, frame: str | None = None) -> "FiducialSet":
        return FiducialSet(frame if frame is not None else self.frame,
                           self.labels, t.apply(self.points))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiducialSet):
            return NotImplemented
        return (self.frame == other.frame and self.labels == other.labels
                and np.array_equal(self.points, other.points))

    def __hash__(self):
        return hash((self.frame, self.labels, self.points.tobytes()))

    def to_dict(self) -> dict:
        return {"frame": self.frame,
                "points": [{"label": l, "xyz_mm": [float(v) for v in p]}
                           for l, p in zip(self.labels, self.points)]}

    @staticmethod
    def from_dict(d: dict) -> "FiducialSet":
        return FiducialSet.from_pairs(d["frame"],
                                      [(p["label"], p["xyz_mm"]) for p in d["points"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_json(s: str) -> "FiducialSet":
        return FiducialSet.from_dict(json.loads(s))


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of a rigid registration: moving -> fixed transform plus
    residual statistics."""

    transform: RigidTransform
    fre_rms: float
    per_point_residuals: tuple
    n_points: int
    converged: bool = True

    def __post_init__(self):
        res = tuple(float(r) for r in self.per_point_residuals)
        object.__setattr__(self, "per_point_residuals", res)
        expected = float(np.sqrt(np.mean(np.square(res)))) if res else 0.0
        if abs(self.fre_rms - expected) > 1e-12 * max(1.0, expected):
            raise ValueError("fre_rms inconsistent with per-point residuals")

    def to_dict(self) -> dict:
        return {"transform": transform_to_dict(self.transform),
                "fre_rms_mm": self.fre_rms,
                "per_point_residuals_mm": list(self.per_point_residuals),
                "n_points": self.n_points,
                "converged": self.converged}

    @staticmethod
    def from_dict(d: dict) -> "RegistrationResult":
        return RegistrationResult(transform_from_dict(d["transform"]),
                                  float(d["fre_rms_mm"]),
                                  tuple(d["per_point_residuals_mm"]),
                                  int(d["n_points"]),
                                  bool(d.get("converged", True)))


@dataclass(frozen=True)
class TrePrediction:
    """Expected TRE at a target point for a given fiducial configuration."""

    target: np.ndarray
    expected_tre_rms: float
    fle_rms: float
    principal_axis_spans: np.ndarray  # f_k, RMS fiducial distance from axis k
    target_offsets: np.ndarray        # d_k, target distance from axis k

    def __post_init__(self):
        for name in ("target", "principal_axis_spans", "target_offsets"):
            v = np.array(getattr(self, name), dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class SurfaceModel:
    """Triangle mesh in mm: vertices (V, 3) and triangle index triples (T, 3)."""

    frame: str
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.min(initial=0) < 0 or (t.size and t.max() >= len(v)):
            raise ValueError("triangle indices out of range")
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if t.size and np.any(areas < 1e-12):
            raise ValueError("mesh contains degenerate (zero-area) triangles")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SurfaceModel):
            return NotImplemented
        return (self.frame == other.frame
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles))

    def __hash__(self):
        return hash((self.frame, self.vertices.tobytes(), self.triangles.tobytes()))

    def to_dict(self) -> dict:
        return {"frame": self.frame,
                "vertices_mm": [[float(x) for x in v] for v in self.vertices],
                "triangles": [[int(i) for i in t] for t in self.triangles]}

    @staticmethod
    def from_dict(d: dict) -> "SurfaceModel":
        return SurfaceModel(d["frame"], np.asarray(d["vertices_mm"], dtype=float),
                            np.asarray(d["triangles"], dtype=np.int64))

    def to_stl(self, name: str = "surface") -> str:
        """ASCII STL; triangle normals recomputed from vertex winding."""
        v, t = self.vertices, self.triangles
        lines = [f"solid {name}"]
        for tri in t:
            a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
            n = np.cross(b - a, c - a)
            n = n / np.linalg.norm(n)
            lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
            lines.append("    outer loop")
            for p in (a, b, c):
                lines.append(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_stl(text: str, frame: str = "Patient") -> "SurfaceModel":
        """Parse ASCII STL; duplicate vertices are merged exactly."""
        verts: list = []
        index: dict = {}
        tris: list = []
        current: list = []
        for line in text.splitlines():
            parts = line.split()
            if parts[:1] == ["vertex"]:
                p = tuple(float(x) for x in parts[1:4])
                if p not in index:
                    index[p] = len(verts)
                    verts.append(p)
                current.append(index[p])
                if len(current) == 3:
                    tris.append(tuple(current))
                    current = []
        if not tris:
            raise ValueError("no facets found in STL input")
        return SurfaceModel(frame, np.asarray(verts, dtype=float),
                            np.asarray(tris, dtype=np.int64))


@dataclass(frozen=True)
class VerificationDecision:
    """Accept/reject outcome of a registration accuracy check."""

    accepted: bool
    fre_rms: float
    threshold_mm: float
    reason: str | None = None


# -- core rigid fit ----------------------------------------------------------

def _check_not_collinear(points: np.ndarray, what: str) -> None:
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] <= 0.0 or sv[1] / sv[0] < _COLLINEAR_SV_RATIO:
        raise DegenerateGeometry(f"{what} points are collinear")


def fit_rigid(fixed: np.ndarray, moving: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping moving points onto fixed points.

    Closed form: centroid removal, cross-covariance SVD, determinant
    correction to exclude reflections.
    """
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    fc = fixed.mean(axis=0)
    mc = moving.mean(axis=0)
    h = (moving - mc).T @ (fixed - fc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # guard against accumulated round-off before the orthonormality assert
    if _orthonormality_residual(r) > 1e-12:
        r = _polar_orthonormalize(r)
    return RigidTransform(r, fc - r @ mc)


def fit_rigid_batch(fixed: np.ndarray, moving: np.ndarray):
    """Vectorized fit_rigid over stacks (T, N, 3) -> rotations (T, 3, 3),
    translations (T, 3). Same math as fit_rigid; kept in lockstep by tests."""
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    fc = fixed.mean(axis=1)
    mc = moving.mean(axis=1)
    h = np.einsum("tni,tnj->tij", moving - mc[:, None, :], fixed - fc[:, None, :])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("tij,tkj->tik", vt.transpose(0, 2, 1), u)))
    corr = np.repeat(np.eye(3)[None, :, :], len(fixed), axis=0)
    corr[:, 2, 2] = d
    r = np.einsum("tij,tjk,tlk->til", vt.transpose(0, 2, 1), corr, u)
    t = fc - np.einsum("tij,tj->ti", r, mc)
    return r, t


def register_points(fixed: FiducialSet, moving: FiducialSet) -> RegistrationResult:
    """Rigid registration of label-matched fiducial sets (moving -> fixed).

    Raises TooFewPoints (< 3 correspondences), LabelMismatch, or
    DegenerateGeometry (collinear configuration).
    """
    if set(fixed.labels) != set(moving.labels):
        raise LabelMismatch("fixed and moving sets carry different labels")
    if len(fixed) < 3:
        raise TooFewPoints("point registration needs at least 3 correspondences")
    moving_matched = moving.subset(fixed.labels)
    _check_not_collinear(fixed.points, "fixed")
    _check_not_collinear(moving_matched.points, "moving")
    t = fit_rigid(fixed.points, moving_matched.points)
    residuals = np.linalg.norm(fixed.points - t.apply(moving_matched.points), axis=1)
    return RegistrationResult(t, float(np.sqrt(np.mean(residuals ** 2))),
                              tuple(residuals), len(fixed))


def rmse_paired(a: FiducialSet, b: FiducialSet) -> float:
    """RMS distance between label-matched fiducials of two sets."""
    if set(a.labels) != set(b.labels):
        raise LabelMismatch("sets carry different labels")
    d = a.points - b.subset(a.labels).points
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def predict_tre(fiducials: FiducialSet, fle_rms: float, target) -> TrePrediction:
    """Expected RMS target registration error at a point, for isotropic FLE.

    The first term FLE^2/N is the error floor at the fiducial centroid; the
    second grows with the target's distance from each principal axis of the
    fiducial configuration relative to the fiducial spread about that axis.
    """
    if len(fiducials) < 3:
        raise TooFewPoints("TRE prediction needs at least 3 fiducials")
    if not fle_rms > 0.0:
        raise ValueError("fle_rms must be positive")
    pts = fiducials.points
    _check_not_collinear(pts, "fiducial")
    centroid = pts.mean(axis=0)
    demeaned = pts - centroid
    cov = demeaned.T @ demeaned / len(pts)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending; columns are axes
    # f_k^2 = mean squared distance from axis k = sum of the other eigenvalues
    f_sq = eigvals.sum() - eigvals
    u = np.asarray(target, dtype=float) - centroid
    comps = eigvecs.T @ u
    d_sq = np.sum(comps ** 2) - comps ** 2  # squared distance from axis k
    tre_sq = (fle_rms ** 2 / len(pts)) * (1.0 + np.sum(d_sq / f_sq) / 3.0)
    return TrePrediction(np.asarray(target, dtype=float), float(np.sqrt(tre_sq)),
                         float(fle_rms), np.sqrt(f_sq), np.sqrt(d_sq))


def verify_registration(result: RegistrationResult,
                        threshold_mm: float = 2.0) -> VerificationDecision:
    """Accept iff fre_rms <= threshold (closed bound: equality accepts)."""
    if result.fre_rms <= threshold_mm:
        return VerificationDecision(True, result.fre_rms, threshold_mm)
    return VerificationDecision(False, result.fre_rms, threshold_mm,
                                f"fre_rms {result.fre_rms:.3f} mm exceeds "
                                f"threshold {threshold_mm:.3f} mm")


# -- surface registration ----------------------------------------------------

def closest_points_on_mesh(points: np.ndarray, surface: SurfaceModel,
                           chunk: int = 256):
    """Closest point on the mesh for each query point (linear triangle scan).

    Returns (closest (N, 3), distance (N,), triangle index (N,)).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    v = surface.vertices
    tri = surface.triangles
    a = v[tri[:, 0]]
    ab = v[tri[:, 1]] - a
    ac = v[tri[:, 2]] - a
    out_pts = np.empty_like(pts)
    out_dist = np.empty(len(pts))
    out_tri = np.empty(len(pts), dtype=np.int64)
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        cp = _closest_point_triangles(p, a, ab, ac)  # (P, T, 3)
        d2 = np.sum((cp - p[:, None, :]) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        out_pts[start:start + chunk] = cp[rows, best]
        out_dist[start:start + chunk] = np.sqrt(d2[rows, best])
        out_tri[start:start + chunk] = best
    return out_pts, out_dist, out_tri


def _closest_point_triangles(p: np.ndarray, a: np.ndarray, ab: np.ndarray,
                             ac: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, a+ab, a+ac) for each p; (P, T, 3).

    Vectorized Voronoi-region case analysis; masks are applied in reverse of
    the sequential precedence so vertex regions win over edges over interior
    (ties on region boundaries produce identical points either way)."""
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("tj,ptj->pt", ab, ap)
    d2 = np.einsum("tj,ptj->pt", ac, ap)
    bp = ap - ab[None, :, :]
    d3 = np.einsum("tj,ptj->pt", ab, bp)
    d4 = np.einsum("tj,ptj->pt", ac, bp)
    cp_ = ap - ac[None, :, :]
    d5 = np.einsum("tj,ptj->pt", ab, cp_)
    d6 = np.einsum("tj,ptj->pt", ac, cp_)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        v_edge_ab = np.clip(np.where(d1 != d3, d1 / (d1 - d3), 0.0), 0.0, 1.0)
        w_edge_ac = np.clip(np.where(d2 != d6, d2 / (d2 - d6), 0.0), 0.0, 1.0)
        bc_denom = (d4 - d3) + (d5 - d6)
        w_edge_bc = np.clip(np.where(bc_denom != 0.0, (d4 - d3) / bc_denom, 0.0),
                            0.0, 1.0)
        denom = va + vb + vc
        v_in = np.where(denom != 0.0, vb / denom, 0.0)
        w_in = np.where(denom != 0.0, vc / denom, 0.0)

    # default: interior
    v_res = v_in
    w_res = w_in
    # edge BC: b + w*(c - b)  ->  (v, w) = (1 - w, w)
    mask = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    v_res = np.where(mask, 1.0 - w_edge_bc, v_res)
    w_res = np.where(mask, w_edge_bc, w_res)
    # edge AC
    mask = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    v_res = np.where(mask, 0.0, v_res)
    w_res = np.where(mask, w_edge_ac, w_res)
    # edge AB
    mask = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v_res = np.where(mask, v_edge_ab, v_res)
    w_res = np.where(mask, 0.0, w_res)
    # vertices override edges
    mask = (d6 >= 0) & (d5 <= d6)  # vertex C
    v_res = np.where(mask, 0.0, v_res)
    w_res = np.where(mask, 1.0, w_res)
    mask = (d3 >= 0) & (d4 <= d3)  # vertex B
    v_res = np.where(mask, 1.0, v_res)
    w_res = np.where(mask, 0.0, w_res)
    mask = (d1 <= 0) & (d2 <= 0)  # vertex A
    v_res = np.where(mask, 0.0, v_res)
    w_res = np.where(mask, 0.0, w_res)

    return a[None, :, :] + v_res[:, :, None] * ab[None, :, :] + w_res[:, :, None] * ac[None, :, :]


def _vertex_normals(surface: SurfaceModel) -> np.ndarray:
    """Area-weighted vertex normals (smooth shading)."""
    v, t = surface.vertices, surface.triangles
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, t[:, k], fn)
    return vn / np.linalg.norm(vn, axis=1, keepdims=True)


def _smooth_normals_at(surface: SurfaceModel, closest: np.ndarray,
                       tri_idx: np.ndarray) -> np.ndarray:
    """Barycentric-interpolated vertex normals at closest points."""
    v, t = surface.vertices, surface.triangles
    vn = _vertex_normals(surface)
    tris = t[tri_idx]
    a = v[tris[:, 0]]
    v0 = v[tris[:, 1]] - a
    v1 = v[tris[:, 2]] - a
    v2 = closest - a
    d00 = np.sum(v0 * v0, axis=1)
    d01 = np.sum(v0 * v1, axis=1)
    d11 = np.sum(v1 * v1, axis=1)
    d20 = np.sum(v2 * v0, axis=1)
    d21 = np.sum(v2 * v1, axis=1)
    den = d00 * d11 - d01 * d01
    w1 = np.clip((d11 * d20 - d01 * d21) / den, 0.0, 1.0)
    w2 = np.clip((d00 * d21 - d01 * d20) / den, 0.0, 1.0)
    w0 = np.clip(1.0 - w1 - w2, 0.0, 1.0)
    n = (w0[:, None] * vn[tris[:, 0]] + w1[:, None] * vn[tris[:, 1]]
         + w2[:, None] * vn[tris[:, 2]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _pose_observability_deficient(surface: SurfaceModel, closest: np.ndarray,
                                  tri_idx: np.ndarray) -> bool:
    """True when the point-to-surface cost has a flat pose direction
    (e.g. rotations of a sphere), making the ICP solution non-unique.

    Smooth interpolated normals are used so that symmetry of the underlying
    shape is detected despite mesh faceting: on a faceted sphere the rotation
    rows r x n vanish almost exactly with radial normals.
    """
    normals = _smooth_normals_at(surface, closest, tri_idx)
    centroid = closest.mean(axis=0)
    r = closest - centroid
    scale = np.sqrt(np.mean(np.sum(r * r, axis=1)))
    if scale <= 0.0:
        return True
    j = np.hstack([normals, np.cross(r / scale, normals)])  # (N, 6)
    sv = np.linalg.svd(j, compute_uv=False)
    return sv[-1] / sv[0] < 2e-2


def icp_register(probed, surface: SurfaceModel,
                 init: RigidTransform | None = None,
                 max_iter: int = 100, tol_mm: float = 1e-4,
                 residual_history: list | None = None) -> RegistrationResult:
    """Iterative closest point: alternate point-to-triangle correspondence
    with a rigid fit until the RMS residual change drops below tol_mm.

    The residual sequence is non-increasing by construction (each rigid fit
    minimizes the current correspondence cost, and re-correspondence can only
    shrink distances); pass residual_history to record it. If max_iter is
    exhausted the last transform is returned flagged converged=False. Raises
    DegenerateGeometry when the converged pose is unobservable (rotationally
    symmetric surface sampling).
    """
    probed = np.asarray(probed, dtype=float).reshape(-1, 3)
    if len(probed) < 10:
        raise TooFewPoints("surface registration needs at least 10 probed points")
    t = init if init is not None else RigidTransform.identity()

    prev_rms = np.inf
    converged = False
    for _ in range(max_iter):
        mapped = t.apply(probed)
        closest, dist, _ = closest_points_on_mesh(mapped, surface)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if residual_history is not None:
            residual_history.append(rms)
        if prev_rms - rms < tol_mm:
            converged = True
            break
        prev_rms = rms
        t = fit_rigid(closest, probed)

    mapped = t.apply(probed)
    closest, dist, tri_idx = closest_points_on_mesh(mapped, surface)
    if _pose_observability_deficient(surface, closest, tri_idx):
        raise DegenerateGeometry("surface sampling leaves the pose ambiguous")
    return RegistrationResult(t, float(np.sqrt(np.mean(dist ** 2))),
                              tuple(dist), len(probed), converged=converged)
