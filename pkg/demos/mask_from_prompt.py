"""Show how delta scores turn a prompt-conditioned denoiser into a pixel mask.

    python demos/mask_from_prompt.py
"""

import numpy as np

from latentfield.delta import delta_scores, kmedoids_query_points, mask_iou, threshold_mask
from latentfield.diffusion import OracleEditDenoiser, make_schedule
from latentfield.scene import LatentImage

sched = make_schedule()
yy, xx = np.mgrid[:12, :16]
region = (yy - 6) ** 2 + (xx - 8) ** 2 <= 16
z = LatentImage(np.random.default_rng(0).normal(size=(12, 16, 4)))
den = OracleEditDenoiser(region, [0.0, 0.6, 0.0, 0.8], 1.0, sched)

scores = delta_scores(den, z, z, "make the disc green", sched, seed=0)
for mu in (0.1, 0.45, 0.9):
    mask = threshold_mask(scores, mu)
    print(f"mu={mu}: area {mask.area_frac:.3f}, IoU with the edited disc {mask_iou(mask, region):.3f}")

mask = threshold_mask(scores)
print("mask:")
print("\n".join("".join("#" if v else "." for v in row) for row in mask.as_bool()))
print("query points:", kmedoids_query_points(mask, 3, seed=0).tolist())
