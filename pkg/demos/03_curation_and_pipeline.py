# %% [markdown]
# # Curation and the command-line pipeline
#
# dHash on the simulator's stand-in images, then the full pipeline on the
# bundled 200-scene fixture, driven from Python through the CLI entry point.

# %%
import tempfile
from pathlib import Path

import numpy as np

from artfit import cli
from artfit import simulate as sim
from artfit.curate import dedup, dhash, hamming
from artfit.template import quadruped

scenes = sim.make_pool(quadruped(), 40, 0.0, seed=2, duplicate_rate=0.1)
hashes = [dhash(sim.render_image(s), s.image_id) for s in scenes]
for s, h in zip(scenes, hashes):
    if s.duplicate_of:
        src = next(x for x in hashes if x.image_id == s.duplicate_of)
        print(s.image_id, "re-upload of", s.duplicate_of, "distance", hamming(h, src))
print("kept", len(dedup(hashes, 6)), "of", len(hashes))

# %% [markdown]
# Distances between unrelated images sit around 32, far from the threshold of 6.

# %%
d = [hamming(a, b) for i, a in enumerate(hashes) for b in hashes[i + 1:]]
print("median pairwise distance", int(np.median(d)), "min", min(d))

# %%
work = Path(tempfile.mkdtemp()) / "run"
cli.main(["pipeline", "--config", "fixture", "-w", str(work)])
print(sorted(p.name for p in work.iterdir()))
