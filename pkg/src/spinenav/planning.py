"""Pedicle screw planning geometry and outcome grading.

The pedicle is modeled as a tapered circular corridor around a centerline
segment; the screw as a cylinder. Breach depth is how far the screw surface
protrudes radially beyond the local corridor wall, and the A-E grade follows
the conventional 2 mm bins with boundary values assigned to the worse bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import LevelMismatch, NegativeBreach

BREACH_SAMPLE_SPACING_MM = 0.25
GRADE_ORDER = "ABCDE"


@dataclass(frozen=True)
class ScrewPlan:
    """Planned (or achieved) screw axis in the patient frame."""

    level: str
    entry: np.ndarray
    direction: np.ndarray
    diameter: float
    length: float

    def __post_init__(self):
        e = np.array(self.entry, dtype=float).reshape(3)
        d = np.array(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("screw direction must be a unit vector")
        if not 2.0 <= self.diameter <= 10.0:
            raise ValueError("screw diameter out of range [2, 10] mm")
        if not 20.0 <= self.length <= 100.0:
            raise ValueError("screw length out of range [20, 100] mm")
        e.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "entry", e)
        object.__setattr__(self, "direction", d)

    def tip(self) -> np.ndarray:
        return self.entry + self.length * self.direction

    def __eq__(self, other):
        if not isinstance(other, ScrewPlan):
            return NotImplemented
        return (self.level == other.level
                and np.array_equal(self.entry, other.entry)
                and np.array_equal(self.direction, other.direction)
                and self.diameter == other.diameter
                and self.length == other.length)

    def __hash__(self):
        return hash((self.level, self.entry.tobytes(), self.direction.tobytes(),
                     self.diameter, self.length))

    def to_dict(self) -> dict:
        return {"level": self.level,
                "entry_mm": [float(v) for v in self.entry],
                "direction": [float(v) for v in self.direction],
                "diameter_mm": self.diameter,
                "length_mm": self.length}

    @staticmethod
    def from_dict(d: dict) -> "ScrewPlan":
        return ScrewPlan(d["level"], np.asarray(d["entry_mm"], float),
                         np.asarray(d["direction"], float),
                         float(d["diameter_mm"]), float(d["length_mm"]))


@dataclass(frozen=True)
class PedicleModel:
    """Corridor centerline p0->p1 with a piecewise-linear radius profile
    over normalized arc position s in [0, 1]."""

    level: str
    p0: np.ndarray
    p1: np.ndarray
    radius_profile: tuple  # of (s, radius_mm), s strictly increasing 0 -> 1

    def __post_init__(self):
        p0 = np.array(self.p0, dtype=float).reshape(3)
        p1 = np.array(self.p1, dtype=float).reshape(3)
        prof = tuple((float(s), float(r)) for s, r in self.radius_profile)
        svals = [s for s, _ in prof]
        if svals[0] != 0.0 or svals[-1] != 1.0 or np.any(np.diff(svals) <= 0):
            raise ValueError("radius profile s must increase strictly from 0 to 1")
        if any(r <= 0.0 for _, r in prof):
            raise ValueError("corridor radii must be positive")
        p0.setflags(write=False)
        p1.setflags(write=False)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "radius_profile", prof)

    def radius_at(self, s):
        """Linear interpolation of the corridor radius at s (clamped)."""
        svals = np.array([p[0] for p in self.radius_profile])
        rvals = np.array([p[1] for p in self.radius_profile])
        return np.interp(np.clip(s, 0.0, 1.0), svals, rvals)

    def max_radius(self) -> float:
        return max(r for _, r in self.radius_profile)

    def axis_length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    def __eq__(self, other):
        if not isinstance(other, PedicleModel):
            return NotImplemented
        return (self.level == other.level and np.array_equal(self.p0, other.p0)
                and np.array_equal(self.p1, other.p1)
                and self.radius_profile == other.radius_profile)

    def __hash__(self):
        return hash((self.level, self.p0.tobytes(), self.p1.tobytes(),
                     self.radius_profile))

    def to_dict(self) -> dict:
        return {"level": self.level,
                "axis_mm": [[float(v) for v in self.p0],
                            [float(v) for v in self.p1]],
                "radius_profile": [[s, r] for s, r in self.radius_profile]}

    @staticmethod
    def from_dict(d: dict) -> "PedicleModel":
        return PedicleModel(d["level"], np.asarray(d["axis_mm"][0], float),
                            np.asarray(d["axis_mm"][1], float),
                            tuple((float(s), float(r))
                                  for s, r in d["radius_profile"]))


@dataclass(frozen=True)
class Grade:
    """Gertzbein-Robbins outcome: letter fixed by breach depth alone."""

    value: str
    breach_mm: float

    def __post_init__(self):
        if self.value not in GRADE_ORDER:
            raise ValueError("grade must be one of A-E")

    def rank(self) -> int:
        return GRADE_ORDER.index(self.value)


@dataclass(frozen=True)
class PlanValidation:
    accepted: bool
    breach_mm: float
    min_clearance_mm: float


@dataclass(frozen=True)
class PlanDeviation:
    entry_offset_mm: float
    angle_deg: float
    tip_offset_mm: float


def _screw_axis_samples(screw: ScrewPlan, pedicle: PedicleModel):
    """Centerline samples at <= 0.25 mm spacing with their corridor-axis
    projection s and perpendicular distance to the corridor axis."""
    n = max(int(np.ceil(screw.length / BREACH_SAMPLE_SPACING_MM)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    pts = screw.entry[None, :] + (t * screw.length)[:, None] * screw.direction[None, :]
    axis = pedicle.p1 - pedicle.p0
    ax_len_sq = float(axis @ axis)
    s = (pts - pedicle.p0) @ axis / ax_len_sq
    perp = pts - (pedicle.p0[None, :] + s[:, None] * axis[None, :])
    rho = np.linalg.norm(perp, axis=1)
    return s, rho


def breach_depth(screw: ScrewPlan, pedicle: PedicleModel) -> float:
    """Deepest radial protrusion of the screw surface beyond the corridor
    wall, over the in-pedicle portion of the shaft (mm, 0 when contained).

    The screw surface sits diameter/2 outside its centerline, so each sample
    contributes max(0, rho + r_screw - corridor_radius(s)). Samples whose
    axis projection falls outside [0, 1] are not inside the pedicle; if the
    whole shaft misses the corridor longitudinally, the clearance at the
    closest approach (clamped s) is reported.
    """
    s, rho = _screw_axis_samples(screw, pedicle)
    r_screw = screw.diameter / 2.0
    inside = (s >= 0.0) & (s <= 1.0)
    if not np.any(inside):
        k = int(np.argmin(np.abs(np.clip(s, 0.0, 1.0) - s)))
        return float(max(0.0, rho[k] + r_screw - float(pedicle.radius_at(s[k]))))
    r_corr = pedicle.radius_at(s[inside])
    depth = rho[inside] + r_screw - r_corr
    return float(max(0.0, float(np.max(depth))))


def grade_gertzbein(breach_mm: float) -> Grade:
    """A: no breach; B: <2; C: <4; D: <6; E: >=6 (boundaries go to the worse
    bin, e.g. exactly 2.0 mm grades C). Raises NegativeBreach."""
    if breach_mm < 0.0:
        raise NegativeBreach("breach depth cannot be negative")
    if breach_mm == 0.0:
        value = "A"
    elif breach_mm < 2.0:
        value = "B"
    elif breach_mm < 4.0:
        value = "C"
    elif breach_mm < 6.0:
        value = "D"
    else:
        value = "E"
    return Grade(value, float(breach_mm))


def plan_deviation(plan: ScrewPlan, achieved: ScrewPlan) -> PlanDeviation:
    """Entry offset, axis angle, and tip offset between plan and outcome."""
    if plan.level != achieved.level:
        raise LevelMismatch(f"{plan.level} vs {achieved.level}")
    entry_off = float(np.linalg.norm(plan.entry - achieved.entry))
    cosang = float(np.clip(np.dot(plan.direction, achieved.direction), -1.0, 1.0))
    angle = float(np.degrees(np.arccos(cosang)))
    tip_off = float(np.linalg.norm(plan.tip() - achieved.tip()))
    return PlanDeviation(entry_off, angle, tip_off)


def validate_plan(plan: ScrewPlan, pedicle: PedicleModel,
                  safety_margin_mm: float = 0.5) -> PlanValidation:
    """Accept iff the screw is fully contained and clears the corridor wall
    by at least the safety margin everywhere inside the pedicle."""
    breach = breach_depth(plan, pedicle)
    s, rho = _screw_axis_samples(plan, pedicle)
    inside = (s >= 0.0) & (s <= 1.0)
    if np.any(inside):
        clearance = pedicle.radius_at(s[inside]) - (rho[inside] + plan.diameter / 2.0)
        min_clear = float(np.min(clearance))
    else:
        min_clear = -breach
    accepted = breach == 0.0 and min_clear >= safety_margin_mm
    return PlanValidation(accepted, breach, min_clear)


# -- report files -------------------------------------------------------------


def grade_report_csv(rows) -> str:
    """CSV of (level, breach_mm, grade) rows plus per-grade percentages."""
    lines = ["level,breach_mm,grade"]
    rows = list(rows)
    for level, breach, grade in rows:
        lines.append(f"{level},{repr(float(breach))},{grade}")
    counts = {g: 0 for g in GRADE_ORDER}
    for _, _, grade in rows:
        counts[grade] += 1
    total = max(len(rows), 1)
    lines.append("grade,percent")
    for g in GRADE_ORDER:
        lines.append(f"{g},{repr(100.0 * counts[g] / total)}")
    return "\n".join(lines) + "\n"


def plans_from_json(text: str) -> list:
    return [ScrewPlan.from_dict(d) for d in json.loads(text)]


def pedicles_from_json(text: str) -> dict:
    return {d["level"]: PedicleModel.from_dict(d) for d in json.loads(text)}
