"""Anatomy of the detection network: the encoder pyramid, the fused
high-level cascade that yields the coarse map, and the gated low-level
refinement behind the final prediction.

Run with:  python demos/02_network_anatomy.py
"""

import numpy as np

from c2fnet.blocks import C2FNet
from c2fnet.tensor import tensor

net = C2FNet(seed=0)
image = tensor(np.random.default_rng(1).random((1, 3, 64, 64)))

pyramid = net.backbone.forward(image)
print("encoder pyramid (strides 2/4/8/16/32):")
for name, feat in zip("f1 f2 f3 f4 f5".split(), (pyramid.f1, pyramid.f2, pyramid.f3, pyramid.f4, pyramid.f5)):
    print(f"  {name}: {feat.shape}")

# The three high levels pass through receptive-field blocks, then two
# fusion + global-context stages squeeze them into one coarse logit map.
coarse = net.cascade(pyramid)
print(f"coarse map (stride 8 logits): {coarse.shape}")

# The attention gate M of the first fusion stage lives strictly in (0, 1).
r4 = net.rfb4.forward(pyramid.f4)
r5 = net.rfb5.forward(pyramid.f5)
fused = net.acfm1.fuse(r4, r5)
print(f"first fusion output: {fused.shape}")

# sigmoid(coarse) multiplies the low levels before the inference head.
low = net.refine.forward(pyramid, coarse)
pred = net.cim.forward(low)
print(f"refined low-level stack: {low.shape}")
print(f"prediction head output (stride 2 logits): {pred.shape}")

outputs = net.forward(image)
print(f"returned maps at input resolution: f_d {outputs.f_d.shape}, p {outputs.p.shape}")
params = sum(p.data.size for _, p in net.named_parameters())
print(f"trainable parameters: {params:,}")
