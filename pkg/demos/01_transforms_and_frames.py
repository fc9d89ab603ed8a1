"""Rigid transforms and the frame graph.

Every spatial relationship in the toolkit is a rotation+translation pair in
millimetres. The frame graph chains the tracked bodies of an operating room
(tracker, reference base, patient, image, tool), and resolving any two frames
composes the unique path between them.
"""

import numpy as np

from spinenav import FrameGraph, RigidTransform, compose, invert, resolve

# a quarter turn about z, then 50 mm along x
turn = RigidTransform.from_axis_angle((0, 0, 1), np.pi / 2)
slide = RigidTransform(np.eye(3), (50.0, 0.0, 0.0))
combined = compose(slide, turn)
print("point (10, 0, 0) through rotate-then-slide:", combined.apply([10.0, 0, 0]))
print("round trip error:", np.abs(compose(combined, invert(combined)).matrix()
                                  - np.eye(4)).max())

# an operating-room chain: tracker sees the reference base and the tool;
# the reference base anchors the patient; registration anchors the image
graph = (FrameGraph()
         .with_edge("Tracker", "DRB", RigidTransform.from_axis_angle(
             (0, 1, 0), 0.2, (120.0, -40.0, 900.0)))
         .with_edge("DRB", "Patient", RigidTransform(np.eye(3), (0.0, 85.0, 10.0)))
         .with_edge("Patient", "PreOpImage", RigidTransform.from_axis_angle(
             (1, 0, 0), 0.05, (4.0, -2.0, 1.0)))
         .with_edge("Tracker", "ToolBody", RigidTransform.from_axis_angle(
             (0, 0, 1), -0.4, (300.0, 60.0, 850.0))))

tool_in_image = resolve(graph, "ToolBody", "PreOpImage")
print("\ntool tip (0,0,0) in image coordinates:", tool_in_image.apply([0.0, 0, 0]))

# resolution is direction-consistent: A->B is exactly the inverse of B->A
fwd = resolve(graph, "Tracker", "PreOpImage")
back = resolve(graph, "PreOpImage", "Tracker")
print("forward/backward consistency:",
      np.abs(compose(fwd, back).matrix() - np.eye(4)).max())
