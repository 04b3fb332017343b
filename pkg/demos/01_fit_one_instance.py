# %% [markdown]
# # Fitting the quadruped template to one set of keypoints
#
# Sample a scene from the simulator, start from a camera 15 degrees off and a
# rest-pose articulation, and watch the reprojection loss fall.

# %%
import math

import numpy as np

from artfit import simulate as sim
from artfit.fit import KeypointObservation, PoseParams, fit_instance
from artfit.geometry import WeakPerspectiveCamera, quat_from_axis_angle, quat_mul
from artfit.metrics import rot_err
from artfit.template import quadruped

model = quadruped()
scene = sim.make_pool(model, 1, 0.0, seed=3)[0]
print(scene.image_id, "bbox", np.round(scene.bbox, 1))

# %% [markdown]
# Keypoints here are noise free, so the optimum is an exact fit.

# %%
obs = KeypointObservation(scene.keypoints, None, scene.bbox)
cam = scene.params.camera
tilt = quat_from_axis_angle([1.0, 1.0, 0.0], math.radians(15))
init = PoseParams.rest(model, WeakPerspectiveCamera(cam.scale, cam.trans, quat_mul(tilt, cam.quat)))
print("initial camera error %.2f deg" % rot_err(init.camera.rotation, cam.rotation))

# %%
res = fit_instance(obs, model, init)
trace = res.loss_trace
for it in (0, 10, 50, 100, 200, len(trace) - 1):
    if it < len(trace):
        print(f"iter {it:4d}  loss {trace[it]:.6f}")
print("converged:", res.converged, "after", res.iterations, "iterations")
print("camera error %.3f deg" % rot_err(res.params.camera.rotation, cam.rotation))

# %% [markdown]
# Per-keypoint residuals in pixels.

# %%
resid = np.linalg.norm(res.params.keypoints2d(model) - scene.keypoints, axis=1)
for name, r in zip(model.kp_names, resid):
    print(f"{name:>10s} {r:8.4f}")
