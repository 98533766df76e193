"""Register one synthetic pair with the handcrafted descriptor and with the
bundled checkpoint, and print the errors after each iteration.

    python3 demos/quickstart.py
"""
from dualreg.cli import bundled_checkpoint_path
from dualreg.data import PairSpec, seeded_pair
from dualreg.features import ExtractorConfig
from dualreg.geometry import RigidTransform, compose, compute_metrics
from dualreg.params import load_params
from dualreg.registration import PipelineConfig, register

shapes = ["torus", "box-frame", "helix", "two-planes", "bunny-like-composite"]
pair = seeded_pair(shapes, PairSpec(n_points=128, keep_fraction=0.7), seed=0, k=4)
print(f"source {pair.P.size} points, reference {pair.Q.size} points, overlap {pair.overlap:.2f}")

params = load_params(bundled_checkpoint_path())
runs = {
    "handcrafted": (None, PipelineConfig(features=ExtractorConfig(backend="handcrafted"))),
    "toy network": (params, PipelineConfig(features=ExtractorConfig(input="handcrafted"))),
}
for name, (p, cfg) in runs.items():
    res = register(pair.P, pair.Q, p, cfg)
    total = RigidTransform.identity()
    print(name)
    for k, T in enumerate(res.transforms):
        total = compose(T, total)
        m = compute_metrics(total, pair.T_gt)
        print(f"  iteration {k}: rotation error {m.mie_rot:8.4f} deg, translation error {m.mie_trans:.5f}")
    w = res.per_iteration[-1].inliers.weights
    print(f"  last iteration kept {len(w)} correspondences, mean confidence {w.mean():.3f}")
