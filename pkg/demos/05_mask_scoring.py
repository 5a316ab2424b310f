"""The five mask metrics on worked examples: what perfect, inverted, and
partially correct predictions score.

Run with:  python demos/05_mask_scoring.py
"""

import numpy as np

from c2fnet.metrics import MaskPair, score_pair

rng = np.random.default_rng(0)
gt = (rng.random((16, 16)) < 0.3).astype(np.float64)


def show(title, pred):
    m = score_pair(MaskPair(pred, gt, name=title))
    print(f"{title:<24} M={m.mae:.4f}  S={m.s:.4f}  F={m.f:.4f}  Fw={m.fw:.4f}  E={m.e:.4f}")


show("perfect prediction", gt.copy())
show("inverted prediction", 1.0 - gt)
show("all background", np.zeros_like(gt))
show("all foreground", np.ones_like(gt))
show("uniform 0.5", np.full_like(gt, 0.5))

# mildly noisy but well-located prediction
noisy = np.clip(gt + rng.normal(0, 0.2, gt.shape), 0, 1)
show("noisy correct blob", noisy)

# a misplaced blob of the right size scores poorly on structure
shifted = np.roll(gt, shift=(6, 6), axis=(0, 1))
show("misplaced blob", shifted)

print("\nthe adaptive threshold binarizes at min(2*mean(prediction), 1);")
print("weighted F replaces background errors by their nearest-object error,")
print("smooths, then decays importance with distance from the object.")
