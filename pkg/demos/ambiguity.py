"""Two local patches that look identical to a K = 4 descriptor.

The single-neighbourhood map cannot separate them; adding the 1-NN cloud's
neighbourhoods shifts matching mass toward the true counterpart.

    python3 demos/ambiguity.py
"""
from dualreg.data import ambiguity_scene
from dualreg.features import ExtractorConfig
from dualreg.registration import PipelineConfig, forward

scene = ambiguity_scene()
for dual in (False, True):
    cfg = PipelineConfig(K=4, n_iter=1, dual=dual,
                         features=ExtractorConfig(backend="handcrafted", K_feat=4))
    F = forward(scene.P.points, scene.Q.points, cfg.init_params(), cfg)[0].F.value
    row = F[scene.query]
    label = "dual  " if dual else "single"
    print(f"{label} F[query, correct] = {row[scene.correct]:.3f}   F[query, decoy] = {row[scene.decoy]:.3f}")
