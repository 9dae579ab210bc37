"""Warping an image with a sampling grid, and checking the gradient by hand."""
import numpy as np

from warpgrid import bilinear_sample, compose_grids, identity_grid
from warpgrid.synth import WarpSpec, generate_texture, grids_from_warp
from warpgrid.warp import bilinear_sample_backward

img = np.asarray(generate_texture(32, 32, "blobs", seed=1), dtype=np.float64)
print("texture", img.shape, "range", img.min().round(3), img.max().round(3))

# an identity grid reads every pixel back exactly
ident = identity_grid(32, 32)
print("identity warp max error:", np.abs(bilinear_sample(img, ident) - img).max())

# a rotation by 10 degrees, both directions
g_st, g_ts = grids_from_warp(WarpSpec(rotation=np.radians(10)), 32, 32)
target = bilinear_sample(img, g_st)
back = bilinear_sample(target, g_ts)
inside = np.all(np.abs(g_st.coords) <= 0.9, axis=0)
print("round trip error in the middle:", np.abs(back - img)[:, inside].mean().round(4))  # blur from two resamplings

# composing the grids gives (nearly) the identity map
cycle = compose_grids(g_st, g_ts).coords
ok = np.all(np.abs(cycle) <= 1, axis=0)  # pixels that leave the frame are flagged with 2
print("composed grid vs identity:", np.abs(cycle - ident.coords)[:, ok].max().round(5), f"({ok.mean():.0%} of pixels)")

# gradient w.r.t. one grid coordinate against a central difference
up = np.random.default_rng(0).standard_normal(target.shape)
grad = bilinear_sample_backward(img, g_st, up).d_grid
g = g_st.coords.astype(np.float64)
h = 1e-6
gp, gm = g.copy(), g.copy()
gp[0, 10, 12] += h
gm[0, 10, 12] -= h
fd = (np.vdot(bilinear_sample(img, gp), up) - np.vdot(bilinear_sample(img, gm), up)) / (2 * h)
print("d/dx at (10, 12): analytic", grad[0, 10, 12].round(6), "finite difference", round(fd, 6))
