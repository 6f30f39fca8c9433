"""
The stack energy and its gradient
=================================

A stack of k slices is scored by two soft Dice terms: one over the whole
stack, and the L2 norm of the per-slice losses.  The second term is what
pushes the network to get every slice right, including thin ones.
"""

import numpy as np

from mdsnet.gradcheck import loss_gradcheck
from mdsnet.loss import LossWeights, per_slice_dice_losses, stack_loss

rng = np.random.default_rng(0)

# a 7-slice label where the organ shrinks towards one end
label = np.zeros((7, 32, 32))
for i, r in enumerate([10, 9, 8, 6, 4, 2, 1]):
    label[i, 16 - r : 16 + r, 16 - r : 16 + r] = 1

# a prediction that is good on big slices and misses the small ones
pred = np.clip(label * 0.9 + 0.05 * rng.random(label.shape), 0, 1)
pred[5:] = 0.02

weights = LossWeights(lambda_v=0.5, lambda_s=0.5)
value = stack_loss(pred, label, weights)
print("per-slice Dice losses:", np.round(per_slice_dice_losses(pred, label), 3))
print(f"volume term {value.l_v:.4f}  slice term {value.l_s:.4f}  total {value.total:.4f}")

# the volume term barely notices the two missed slices, the slice term does
print("volume-only total:", round(stack_loss(pred, label, LossWeights(1.0, 0.0)).total, 4))

# the analytic gradient against central differences, on the awkward cases too
for kind in ("random", "empty-slices", "perfect"):
    print(f"{kind:>13}: max relative error {loss_gradcheck(0, 7, kind):.2e}")
