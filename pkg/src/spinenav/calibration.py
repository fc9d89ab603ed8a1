"""Instrument and imaging-chain calibration.

Covers pivot calibration of tracked tools, ideal-pinhole C-arm calibration by
direct linear transform, fiducial blob detection in synthetic projection
rasters, two-view midpoint triangulation, and the automatic fiducial-based 2D
patient registration chain that ties them together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    CoplanarPoints,
    InsufficientRotation,
    LabelMismatch,
    ParallelRays,
    PatternAmbiguous,
    PointAtInfinity,
    TooFewBlobs,
    TooFewCommonLabels,
    TooFewPoints,
    TooFewPoses,
)
from .geom import RigidTransform
from .registration import FiducialSet, RegistrationResult, register_points

VIEW_LABELS = ("AP", "LP")


@dataclass(frozen=True)
class ToolDefinition:
    """Calibrated tracked tool: tip offset and working axis in the body frame."""

    body_frame: str
    tip_offset: np.ndarray
    axis: np.ndarray
    calib_residual_rms: float

    def __post_init__(self):
        tip = np.array(self.tip_offset, dtype=float).reshape(3)
        ax = np.array(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
            raise ValueError("tool axis must be a unit vector")
        if self.calib_residual_rms < 0.0:
            raise ValueError("calibration residual cannot be negative")
        tip.setflags(write=False)
        ax.setflags(write=False)
        object.__setattr__(self, "tip_offset", tip)
        object.__setattr__(self, "axis", ax)


@dataclass(frozen=True)
class PivotResult:
    """Output of a pivot calibration."""

    tip_offset: np.ndarray
    pivot_point: np.ndarray
    residual_rms: float

    def __post_init__(self):
        for name in ("tip_offset", "pivot_point"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def tool_definition(self, body_frame: str = "ToolBody",
                        axis=None) -> ToolDefinition:
        """Package as a ToolDefinition; axis defaults to the tip direction."""
        a = np.asarray(axis, float) if axis is not None else np.array(self.tip_offset)
        a = a / np.linalg.norm(a)
        return ToolDefinition(body_frame, self.tip_offset, a, self.residual_rms)


def pivot_calibrate(poses, min_poses: int = 10) -> PivotResult:
    """Recover a tool tip offset by pivoting about a fixed point.

    Solves the stacked linear system [R_i | -I] [tip; pivot] = -t_i in the
    least-squares sense. Raises TooFewPoses, or InsufficientRotation when the
    poses share a rotation axis and the system goes rank deficient.
    """
    poses = list(poses)
    if len(poses) < min_poses:
        raise TooFewPoses(f"pivot calibration needs >= {min_poses} poses")
    n = len(poses)
    a = np.zeros((3 * n, 6))
    b = np.zeros(3 * n)
    for i, p in enumerate(poses):
        a[3 * i:3 * i + 3, :3] = p.rotation
        a[3 * i:3 * i + 3, 3:] = -np.eye(3)
        b[3 * i:3 * i + 3] = -p.translation
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-6:
        raise InsufficientRotation("poses lack rotational diversity")
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    tip, pivot = x[:3], x[3:]
    res = (a @ x - b).reshape(n, 3)
    residual_rms = float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))
    return PivotResult(tip, pivot, residual_rms)


# -- projective model ----------------------------------------------------------


@dataclass(frozen=True)
class ProjectionModel:
    """3x4 projective map from CArm-frame mm to detector mm.

    Normalized so the third row's rotational part has unit norm; rank 3.
    """

    matrix: np.ndarray
    view_label: str
    frame: str = "CArm"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 4)
        if self.view_label not in VIEW_LABELS:
            raise ValueError(f"view_label must be one of {VIEW_LABELS}")
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[2] / sv[0] < 1e-12:
            raise ValueError("projection matrix must have rank 3")
        if abs(np.linalg.norm(m[2, :3]) - 1.0) > 1e-9:
            raise ValueError("projection matrix must be scale-normalized")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def from_matrix(matrix, view_label: str, frame: str = "CArm") -> "ProjectionModel":
        """Normalize an arbitrary-scale 3x4 matrix (sign: positive depths
        are the caller's responsibility; see dlt_calibrate)."""
        m = np.array(matrix, dtype=float).reshape(3, 4)
        return ProjectionModel(m / np.linalg.norm(m[2, :3]), view_label, frame)

    def camera_center(self) -> np.ndarray:
        m = self.matrix
        return -np.linalg.solve(m[:, :3], m[:, 3])

    def backproject_ray(self, uv):
        """Unit ray direction from the camera center through detector uv."""
        d = np.linalg.solve(self.matrix[:, :3], np.array([uv[0], uv[1], 1.0]))
        return d / np.linalg.norm(d)

    def to_dict(self) -> dict:
        return {"view": self.view_label,
                "P": [float(v) for v in self.matrix.ravel()]}

    @staticmethod
    def from_dict(d: dict, frame: str = "CArm") -> "ProjectionModel":
        return ProjectionModel.from_matrix(np.asarray(d["P"], float).reshape(3, 4),
                                           d["view"], frame)


@dataclass(frozen=True)
class Detection2D:
    """Labeled 2D fiducial detections (detector mm) for one view."""

    view_label: str
    labels: tuple
    uv: np.ndarray          # (N, 2)
    confidence: np.ndarray  # (N,)

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        uv = np.array(self.uv, dtype=float).reshape(len(labels), 2)
        conf = np.array(self.confidence, dtype=float).reshape(len(labels))
        if len(set(labels)) != len(labels):
            raise ValueError("detection labels must be unique per view")
        if np.any(conf < 0.0) or np.any(conf > 1.0):
            raise ValueError("confidence must lie in [0, 1]")
        uv.setflags(write=False)
        conf.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "confidence", conf)

    @staticmethod
    def from_pairs(view_label, pairs, confidence=None) -> "Detection2D":
        labels = tuple(p[0] for p in pairs)
        uv = np.asarray([p[1] for p in pairs], dtype=float).reshape(len(labels), 2)
        conf = (np.ones(len(labels)) if confidence is None
                else np.asarray(confidence, dtype=float))
        return Detection2D(view_label, labels, uv, conf)

    def position(self, label: str) -> np.ndarray:
        return self.uv[self.labels.index(label)]


def project(model: ProjectionModel, p):
    """Perspective projection of one point (3,) or a stack (N, 3) to detector mm."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    h = pts @ model.matrix[:, :3].T + model.matrix[:, 3]
    w = h[:, 2]
    if np.any(np.abs(w) <= 1e-9):
        raise PointAtInfinity("point lies on the camera plane")
    uv = h[:, :2] / w[:, None]
    return uv[0] if single else uv


def dlt_calibrate(world, image: Detection2D, frame: str = "CArm") -> ProjectionModel:
    """Estimate a 3x4 projection from labeled 3D-2D correspondences.

    11-parameter direct linear transform with Hartley normalization on both
    sides, minimizing algebraic error. Raises TooFewPoints (< 6) or
    CoplanarPoints when the 3D points do not span a volume.
    """
    world = list(world)
    labels = [w[0] for w in world]
    if set(labels) & set(image.labels) != set(labels) or set(labels) != set(image.labels):
        raise LabelMismatch("world and image correspondences carry different labels")
    if len(world) < 6:
        raise TooFewPoints("DLT needs at least 6 correspondences")
    x = np.asarray([w[1] for w in world], dtype=float)
    uv = np.asarray([image.position(l) for l in labels], dtype=float)

    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    if sv[2] / sv[0] < 1e-6:
        raise CoplanarPoints("calibration points are coplanar")

    # Hartley normalization: centroid to origin, mean distance sqrt(dim)
    def _norm_3d(pts):
        c = pts.mean(axis=0)
        s = np.sqrt(3.0) / np.mean(np.linalg.norm(pts - c, axis=1))
        t = np.diag([s, s, s, 1.0])
        t[:3, 3] = -s * c
        return t

    def _norm_2d(pts):
        c = pts.mean(axis=0)
        s = np.sqrt(2.0) / np.mean(np.linalg.norm(pts - c, axis=1))
        t = np.diag([s, s, 1.0])
        t[:2, 2] = -s * c
        return t

    t3 = _norm_3d(x)
    t2 = _norm_2d(uv)
    xh = np.hstack([x, np.ones((len(x), 1))]) @ t3.T
    uvh = np.hstack([uv, np.ones((len(uv), 1))]) @ t2.T

    a = np.zeros((2 * len(x), 12))
    for i, (xi, ui) in enumerate(zip(xh, uvh)):
        a[2 * i, 0:4] = xi
        a[2 * i, 8:12] = -ui[0] * xi
        a[2 * i + 1, 4:8] = xi
        a[2 * i + 1, 8:12] = -ui[1] * xi
    _, _, vt = np.linalg.svd(a)
    p_norm = vt[-1].reshape(3, 4)
    p = np.linalg.inv(t2) @ p_norm @ t3

    # orient so the calibration points have positive projective depth
    depths = np.hstack([x, np.ones((len(x), 1))]) @ p[2]
    if np.sum(depths > 0) < len(x) / 2:
        p = -p
    return ProjectionModel.from_matrix(p, image.view_label, frame)


def reprojection_rms(model: ProjectionModel, world, image: Detection2D) -> float:
    """RMS detector-plane distance between projections and detections."""
    labels = [w[0] for w in world]
    pts = np.asarray([w[1] for w in world], dtype=float)
    uv = np.asarray([image.position(l) for l in labels], dtype=float)
    d = project(model, pts) - uv
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def triangulate(view_a, view_b):
    """Midpoint triangulation of one labeled point seen in two views.

    view_a / view_b are (ProjectionModel, uv) pairs. Returns (point mm,
    ray_gap mm) where ray_gap is the length of the common perpendicular.
    Raises ParallelRays when the back-projected rays are within 5 degrees.
    """
    model_a, uv_a = view_a
    model_b, uv_b = view_b
    c1 = model_a.camera_center()
    c2 = model_b.camera_center()
    d1 = model_a.backproject_ray(uv_a)
    d2 = model_b.backproject_ray(uv_b)
    cosang = abs(float(np.dot(d1, d2)))
    if cosang >= np.cos(np.deg2rad(5.0)):
        raise ParallelRays("view rays are within 5 degrees of parallel")
    r = c2 - c1
    a11 = 1.0
    a12 = -float(np.dot(d1, d2))
    a22 = 1.0
    b1 = float(np.dot(r, d1))
    b2 = -float(np.dot(r, d2))
    det = a11 * a22 - a12 * a12
    l1 = (b1 * a22 - a12 * b2) / det
    l2 = (a11 * b2 - a12 * b1) / det
    p1 = c1 + l1 * d1
    p2 = c2 + l2 * d2
    return (p1 + p2) / 2.0, float(np.linalg.norm(p1 - p2))


def register_patient_2d(jig: FiducialSet, views) -> RegistrationResult:
    """Automatic 2D patient registration from two calibrated views.

    Triangulates every jig fiducial labeled in both views into the CArm
    frame, then rigidly registers the jig's known patient-frame coordinates
    to the triangulated points (result maps patient -> CArm). Raises
    TooFewCommonLabels below 4 shared fiducials.
    """
    (model_a, det_a), (model_b, det_b) = views
    common = [l for l in jig.labels if l in det_a.labels and l in det_b.labels]
    if len(common) < 4:
        raise TooFewCommonLabels(
            f"need >= 4 fiducials in both views, got {len(common)}")
    tri_pts = np.array([
        triangulate((model_a, det_a.position(l)), (model_b, det_b.position(l)))[0]
        for l in common])
    fixed = FiducialSet(model_a.frame, tuple(common), tri_pts)
    return register_points(fixed, jig.subset(common))


def pinhole_projection(camera_pose: RigidTransform, focal_mm: float,
                       view_label: str, frame: str = "CArm") -> ProjectionModel:
    """Ideal pinhole with principal point (0, 0): P = diag(f, f, 1) [R | t].

    camera_pose maps frame coordinates into camera coordinates (x right,
    y down on the detector, z along the beam toward the detector).
    """
    k = np.diag([focal_mm, focal_mm, 1.0])
    rt = np.hstack([camera_pose.rotation, camera_pose.translation[:, None]])
    return ProjectionModel.from_matrix(k @ rt, view_label, frame)


# -- synthetic projection rasters ------------------------------------------------


@dataclass(frozen=True)
class SyntheticProjectionImage:
    """16-bit raster of fiducial blobs plus the detector-geometry sidecar.

    pixel (row, col) maps to detector mm (origin + mm_per_pixel * (col, row)).
    """

    view_label: str
    pixels: np.ndarray      # (H, W) uint16
    mm_per_pixel: float
    origin_mm: np.ndarray   # detector mm of pixel (0, 0)

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.uint16)
        origin = np.array(self.origin_mm, dtype=float).reshape(2)
        if self.mm_per_pixel <= 0.0:
            raise ValueError("mm_per_pixel must be positive")
        px.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "origin_mm", origin)

    def pixel_to_mm(self, rows, cols):
        return np.stack([self.origin_mm[0] + np.asarray(cols) * self.mm_per_pixel,
                         self.origin_mm[1] + np.asarray(rows) * self.mm_per_pixel],
                        axis=-1)


def write_projection_image(image: SyntheticProjectionImage, path) -> None:
    """Write the raster as binary PGM (P5, 16-bit big-endian) plus a JSON
    sidecar '<path>.json' carrying the detector geometry."""
    path = Path(path)
    h, w = image.pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(image.pixels.astype(">u2").tobytes())
    sidecar = {"view": image.view_label,
               "mm_per_pixel": image.mm_per_pixel,
               "origin_mm": [float(v) for v in image.origin_mm]}
    Path(str(path) + ".json").write_text(json.dumps(sidecar), encoding="utf-8")


def read_projection_image(path) -> SyntheticProjectionImage:
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("expected binary PGM (P5)")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 65535:
        raise ValueError("expected 16-bit PGM")
    pixels = np.frombuffer(parts[3][:2 * w * h], dtype=">u2").reshape(h, w)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    return SyntheticProjectionImage(sidecar["view"], pixels.astype(np.uint16),
                                    float(sidecar["mm_per_pixel"]),
                                    np.asarray(sidecar["origin_mm"], float))


def render_fiducial_raster(uv_points, view_label: str,
                           mm_per_pixel: float = 0.5,
                           size_px: tuple = (512, 512),
                           origin_mm=None,
                           blob_sigma_mm: float = 1.2,
                           peak: int = 60000) -> SyntheticProjectionImage:
    """Render Gaussian fiducial blobs at detector-mm positions into a 16-bit
    raster. Points outside the field of view are clipped away naturally."""
    h, w = size_px
    if origin_mm is None:
        origin_mm = (-w * mm_per_pixel / 2.0, -h * mm_per_pixel / 2.0)
    origin = np.asarray(origin_mm, dtype=float)
    img = np.zeros((h, w), dtype=float)
    cols = (np.arange(w) + 0.0) * mm_per_pixel + origin[0]
    rows = (np.arange(h) + 0.0) * mm_per_pixel + origin[1]
    for uv in np.atleast_2d(np.asarray(uv_points, dtype=float)):
        du = cols - uv[0]
        dv = rows - uv[1]
        img += peak * np.outer(np.exp(-dv ** 2 / (2 * blob_sigma_mm ** 2)),
                               np.exp(-du ** 2 / (2 * blob_sigma_mm ** 2)))
    return SyntheticProjectionImage(view_label,
                                    np.clip(img, 0, 65535).astype(np.uint16),
                                    mm_per_pixel, origin)


def detect_fiducials(image: SyntheticProjectionImage, pattern,
                     tolerance_mm: float = 0.5) -> Detection2D:
    """Extract blob centroids from a synthetic raster and label them against
    an expected projected pattern by pairwise-distance signature.

    pattern maps label -> expected detector-mm position (the jig fiducials
    projected through the nominal view model). Unmatched blobs are dropped;
    fiducials outside the field of view are simply absent from the result.
    Raises TooFewBlobs (< 4 blobs) or PatternAmbiguous when more than one
    assignment is consistent within tolerance_mm.
    """
    labels = list(pattern.keys())
    expected = np.asarray([pattern[l] for l in labels], dtype=float)

    px = image.pixels.astype(float)
    background = np.median(px)
    peak = px.max()
    if peak <= background:
        raise TooFewBlobs("raster contains no blobs")
    mask = px > background + 0.05 * (peak - background)
    labeled, n_blobs = ndimage.label(mask)
    if n_blobs < 4:
        raise TooFewBlobs(f"found only {n_blobs} blobs")
    centroids_rc = ndimage.center_of_mass(px - background, labeled,
                                          index=range(1, n_blobs + 1))
    rows = np.array([c[0] for c in centroids_rc])
    cols = np.array([c[1] for c in centroids_rc])
    blobs = image.pixel_to_mm(rows, cols)

    assignments = _match_signatures(blobs, expected, tolerance_mm)
    if not assignments:
        raise PatternAmbiguous("no label assignment fits the detected blobs")
    if len(assignments) > 1:
        raise PatternAmbiguous(
            f"{len(assignments)} label assignments fit within tolerance")
    assign = assignments[0]
    pairs = [(labels[j], blobs[i]) for i, j in sorted(assign.items(), key=lambda kv: kv[1])]
    return Detection2D.from_pairs(image.view_label, pairs)


def _match_signatures(blobs: np.ndarray, expected: np.ndarray,
                      tol: float, max_solutions: int = 2) -> list:
    """All maximum-cardinality injective blob->pattern assignments whose
    pairwise distances agree within tol. Branch and bound over blobs; a blob
    may also be skipped (dropped as spurious/unmatchable)."""
    nb, ne = len(blobs), len(expected)
    d_blob = np.linalg.norm(blobs[:, None, :] - blobs[None, :, :], axis=2)
    d_exp = np.linalg.norm(expected[:, None, :] - expected[None, :, :], axis=2)
    best: dict = {"size": 0, "solutions": []}

    def recurse(i: int, assign: dict):
        if len(assign) + (nb - i) < best["size"]:
            return  # cannot even tie the current best
        if i == nb:
            if len(assign) > best["size"]:
                best["size"] = len(assign)
                best["solutions"] = [dict(assign)]
            elif (len(assign) == best["size"] and len(assign) > 0
                  and len(best["solutions"]) < max_solutions
                  and dict(assign) not in best["solutions"]):
                best["solutions"].append(dict(assign))
            return
        used = set(assign.values())
        for j in range(ne):
            if j in used:
                continue
            ok = all(abs(d_blob[i, k] - d_exp[j, jj]) <= tol
                     for k, jj in assign.items())
            if ok:
                assign[i] = j
                recurse(i + 1, assign)
                del assign[i]
        recurse(i + 1, assign)  # drop blob i as spurious

    recurse(0, {})
    return best["solutions"]
