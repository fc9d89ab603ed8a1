"""Pedicle screw planning and outcome grading.

A pedicle is a tapered corridor; a screw breaches when its surface pokes
through the corridor wall. Grades follow the conventional A-E bins on breach
depth, with boundaries going to the worse bin.
"""

import numpy as np

from spinenav import PedicleModel, ScrewPlan, breach_depth, grade_gertzbein, plan_deviation, validate_plan

pedicle = PedicleModel("L3-left", (0.0, 0.0, 0.0), (0.0, 0.0, 40.0),
                       ((0.0, 4.5), (0.5, 3.2), (1.0, 4.5)))
plan = ScrewPlan("L3-left", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                 diameter=5.0, length=40.0)

check = validate_plan(plan, pedicle, safety_margin_mm=0.5)
print(f"planned screw: accepted={check.accepted}, "
      f"waist clearance {check.min_clearance_mm:.2f} mm")

print("\nlateral drift   breach    grade")
for drift in (0.0, 0.5, 1.0, 2.5, 4.5, 7.0):
    achieved = ScrewPlan("L3-left", (drift, 0.0, 0.0), (0.0, 0.0, 1.0), 5.0, 40.0)
    breach = breach_depth(achieved, pedicle)
    grade = grade_gertzbein(breach)
    dev = plan_deviation(plan, achieved)
    print(f"  {drift:4.1f} mm     {breach:5.2f} mm    {grade.value}   "
          f"(entry offset {dev.entry_offset_mm:.1f} mm, tip offset "
          f"{dev.tip_offset_mm:.1f} mm)")

# an angular error tilts the tip out through the waist
tilt = np.deg2rad(4.0)
tilted = ScrewPlan("L3-left", (0.0, 0.0, 0.0),
                   (np.sin(tilt), 0.0, np.cos(tilt)), 5.0, 40.0)
dev = plan_deviation(plan, tilted)
print(f"\n4-degree tilt: breach {breach_depth(tilted, pedicle):.2f} mm, "
      f"tip offset {dev.tip_offset_mm:.2f} mm, grade "
      f"{grade_gertzbein(breach_depth(tilted, pedicle)).value}")
