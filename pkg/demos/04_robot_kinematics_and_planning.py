"""Robot-arm kinematics and safe trajectory planning.

The default model is a generic six-revolute arm with a spherical wrist.
Planning to a screw axis is a 5-DOF task: the roll about the tool axis is
free, and the safe planner spends that freedom to steer the wrist around
obstacles.
"""

import numpy as np

from spinenav import JointVector, default_robot, fk, ik, jacobian, plan_safe
from spinenav.kinematics import CollisionScene, check_collision, fk_frames, min_clearance, plan_trajectory, sphere

model = default_robot()
home = JointVector([0.0, -0.6, 0.6, 0.0, 0.7, 0.0])

pose = fk(model, home.q)
print("home flange position:", np.round(pose.translation, 1), "mm")

# inverse kinematics round trip
rng = np.random.default_rng(3)
q_goal = rng.uniform(model.joint_limits[:, 0] * 0.7, model.joint_limits[:, 1] * 0.7)
solution = ik(model, fk(model, q_goal), home)
err = np.linalg.norm(fk(model, solution.q).translation - fk(model, q_goal).translation)
print(f"ik round-trip position error: {err:.2e} mm")

# manipulability drops to zero at the wrist singularity (q5 = 0)
for q5 in (0.7, 0.2, 0.0):
    q = home.q.copy()
    q[4] = q5
    sv = np.linalg.svd(jacobian(model, q), compute_uv=False)
    print(f"q5 = {q5:+.1f} rad -> smallest Jacobian singular value {sv[-1]:.2e}")

# plan to a pedicle axis with an obstacle crowding the wrist
entry = np.array([450.0, 100.0, 150.0])
direction = np.array([0.3, 0.1, -1.0])
direction = direction / np.linalg.norm(direction)

plain = plan_trajectory(model, home, (entry, direction), standoff_mm=30.0)
final = fk(model, plain.joints[-1])
print(f"\nplain plan: {len(plain)} samples, max joint step "
      f"{plain.max_step_rad():.3f} rad, tip error "
      f"{np.linalg.norm(final.translation - entry):.4f} mm")

flange = fk_frames(model, plain.joints[-1])[6]
bracket_tip = flange[:3, :3] @ [70.0, 0.0, -40.0] + flange[:3, 3]
scene = CollisionScene((("drape pole", sphere(bracket_tip, 30.0)),),
                       safety_margin=2.0)
print("roll-0 approach collides:", bool(check_collision(model, scene, plain.joints[-1])))

safe = plan_safe(model, scene, home, (entry, direction), standoff_mm=30.0)
clearances = [min_clearance(model, scene, q) for q in safe.joints]
print(f"safe plan found: collision_checked={safe.collision_checked}, "
      f"min clearance along path {min(clearances):.1f} mm")
