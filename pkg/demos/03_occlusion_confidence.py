"""Occluders in the target should get low confidence after the uncertainty stage."""
import numpy as np

from warpgrid import calibration, direct_solve
from warpgrid.losses import loss_reconstruction
from warpgrid.synth import SynthConfig, generate_texture, make_pair, sample_warp_spec

seed = 2003
pair = make_pair(generate_texture(64, 64, "value_noise", seed), sample_warp_spec(SynthConfig(), seed),
                 occlusion_fraction=0.25, seed=seed)
M_t, V_t = np.asarray(pair.M_t) > 0, np.asarray(pair.V_t) > 0
occ = M_t & (np.asarray(pair.occluder) > 0)
print("occluded share of the target object:", round(occ.sum() / M_t.sum(), 3))

res = direct_solve(pair.I_s, pair.I_t, pair.M_s, pair.M_t)
C_t = np.asarray(res.C_t)
print("mean confidence, visible target pixels: ", C_t[V_t].mean().round(3))
print("mean confidence, occluded target pixels:", C_t[occ].mean().round(3))

# confidence should fall where the cycle error is large
one = np.ones_like(C_t)
err = loss_reconstruction(pair.I_s, pair.I_t, res.G_st.coords, res.G_ts.coords, one, one,
                          pair.M_s, pair.M_t).maps["error_t"]
print("Spearman rho(confidence, cycle error):", round(calibration(C_t, err, pair.M_t), 3))

# a coarse text rendering of the confidence map, '#' = low
rows = C_t[::4, ::4]
for r in rows:
    print("".join("#" if c < 0.5 else ("+" if c < 0.9 else ".") for c in r))
