"""Train the tiny predictor through the four stages on small synthetic sets.

Stage ii's "real" data is a keypoint-only synthetic split: those pairs expose
their 16 keypoints and hide the dense ground truth.
"""
import tempfile

from warpgrid.predictor import PredictorConfig, TinyPredictor, TrainConfig, evaluate_dense, load_checkpoint, \
    train_predictor
from warpgrid.synth import SynthConfig, generate_texture, make_pair, sample_warp_spec


def pairs(seed, n, size=32):
    cfg = SynthConfig(size=size, seed=seed, rotation_max_deg=15, scale_range=(0.9, 1.1), translation_max=0.1)
    return [make_pair(generate_texture(size, size, "blobs", seed + i), sample_warp_spec(cfg, seed + i), 0.0, seed + i)
            for i in range(n)]


dense, keypoint_only, held_out = pairs(100, 48), pairs(200, 48), pairs(300, 8)
model = TinyPredictor(PredictorConfig(base_channels=8))
print("parameters:", model.n_parameters())
print("held-out Synthetic Dense at init:", round(evaluate_dense(model, held_out), 5))

cfg = TrainConfig(budgets={"i": 500, "ii": 100, "iii": 100, "iv": 100}, learning_rate=1e-3, batch_size=4,
                  eval_every=50)
with tempfile.TemporaryDirectory() as tmp:
    res = train_predictor(dense, keypoint_only, cfg, model, held_out, checkpoint_dir=tmp)
    for rec in res.log:
        terms = ", ".join(f"{k} {v:.4f}" for k, v in sorted(rec["terms"].items()))
        print(f"stage {rec['stage']:>3} step {rec['step']:4d}  held-out {rec['held_out_synthetic_dense']:.5f}  {terms}")
    for stage, path in res.checkpoints.items():
        print(f"checkpoint {stage}: {evaluate_dense(load_checkpoint(path)[0], held_out):.5f}")
