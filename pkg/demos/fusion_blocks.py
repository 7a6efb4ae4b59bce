"""
Inside the fusion heads
=======================

The gated unit mixes two tanh branches with a sigmoid gate; crossmodal
attention lets one modality's tokens query the other's.
"""

import numpy as np

from multifuse.autodiff import Tensor
from multifuse.fusion import crossmodal_attention, gmu_fuse

rng = np.random.default_rng(1)
d_text, d_img, g = 6, 6, 4
params = {
    "fusion.gmu.w_t": Tensor(rng.standard_normal((g, d_text))),
    "fusion.gmu.w_v": Tensor(rng.standard_normal((g, d_img))),
    "fusion.gmu.w_z": Tensor(np.zeros((g, d_text + d_img))),
    "fusion.gmu.b_t": Tensor(np.zeros(g)),
    "fusion.gmu.b_v": Tensor(np.zeros(g)),
    "fusion.gmu.b_z": Tensor(np.zeros(g)),
}
f_t, f_v = Tensor(rng.standard_normal((2, d_text))), Tensor(rng.standard_normal((2, d_img)))

# a zero gate pre-activation gives z = 0.5, an even blend
for bias in (0.0, 4.0, -4.0):
    params["fusion.gmu.b_z"] = Tensor(np.full(g, bias))
    h, z = gmu_fuse(f_t, f_v, params)
    print(f"b_z={bias:+.0f}  z={z.data[0].round(3)}  h={h.data[0].round(3)}")

# image tokens query a padded text sequence; the padded keys get zero weight
d = 4
img_tokens = Tensor(rng.standard_normal((1, 3, d)))
txt_tokens = Tensor(rng.standard_normal((1, 5, d)))
mask = np.array([[1, 1, 1, 0, 0]])
w = [Tensor(rng.standard_normal((d, d))) for _ in range(3)]
y, scores = crossmodal_attention(img_tokens, txt_tokens, mask, *w, return_scores=True)
print("scores (rows sum to 1):")
print(scores.data[0].round(3))
print("adapted image tokens:", y.shape)
