# %% [markdown]
# # How well do the selection criteria find good pseudo-labels?
#
# A pool of 1000 simulated images, 30% of them corrupted (wrong or truncated
# objects).  Two emulated detectors label every image.  Corrupted images get
# junk keypoints but confident scores, which is what makes plain confidence
# ranking unreliable.

# %%
import numpy as np
from scipy.stats import spearmanr

from artfit import simulate as sim
from artfit.select import bbox_center, default_transforms, score_records, select_top_n
from artfit.template import quadruped

model = quadruped()
scenes = sim.make_pool(model, 1000, 0.3, seed=1)
primary, auxiliary = sim.default_profiles(1)
prim = [sim.detect_with_transforms(primary, s, default_transforms(bbox_center(s.bbox))) for s in scenes]
aux = [sim.detect(auxiliary, s) for s in scenes]

err = np.array([np.mean(np.linalg.norm(r.keypoints - s.keypoints, axis=1)) / max(s.bbox[2:])
                for r, s in zip(prim, scenes)])
print("pool mean keypoint error (bbox units): %.4f" % err.mean())

# %% [markdown]
# Score with every criterion; take the best 10% of each.

# %%
index = {s.image_id: i for i, s in enumerate(scenes)}
corrupted = np.array([s.corrupted for s in scenes])
for crit in ("kp-conf", "cf-mt", "cf-cm", "cf-cm2"):
    scores = score_records(crit, prim, aux, model)
    vals = np.array([s.value for s in scores])
    rho = spearmanr(vals, err)[0]
    top = [index[i] for i in select_top_n(scores, 100).selected_ids]
    print(f"{crit:8s} spearman {rho:+.3f}   top-100 error {err[top].mean():.4f}"
          f"   corrupted in top-100: {corrupted[top].sum()}")

# %% [markdown]
# Confidence correlates negatively with error as it should, but the
# overconfident corrupted images crowd the top of its ranking.  The three
# consistency criteria keep them out.
