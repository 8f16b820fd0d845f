"""
Cost-sensitive objectives and weight fuzziness
==============================================

A cost matrix charges ``c`` for any mistake that involves the protected
class. The fuzziness of the convolution kernels is the mean binary entropy
of 1 / (1 + e^|w|); small weights sit near ln 2 and large ones near 0.
"""

import math

import numpy as np

from mmrb import CostMatrix, LossConfig, Tensor, build_lenet, composite_loss, fuzziness
from mmrb.data import synthetic_dataset

cm = CostMatrix(m=4, p=1, c=10.0)
print("cost matrix (rows: prediction, columns: truth)\n", cm.entries)

for w in (0.0, 0.5, 1.0, 2.0, 5.0, 20.0):
    print(f"fuzziness of a weight of size {w:5.1f}: {fuzziness(Tensor([w], dtype=np.float64)).item():.5f}")
print("ln 2 =", round(math.log(2), 5))

# The four objectives on one batch of a freshly initialized network.
model = build_lenet(1, 12, (3, 4), 2, (16, 12), 10, seed=0, kernel=3)
data = synthetic_dataset(32, side=12)
cost = CostMatrix(10, 0, 10.0)
for cfg in (LossConfig("std"), LossConfig("csa", cost=cost), LossConfig("csa_l2", lam=5e-4, cost=cost),
            LossConfig("cse", gamma=1.0, cost=cost)):
    total, parts = composite_loss(model, data.images, data.labels, cfg, return_parts=True)
    print(f"{cfg.mode:7s} total={total.item():.4f} ce={parts.ce:.4f} cost={parts.cost:.4f} "
          f"fuzziness={parts.fuzziness:.4f} l2={parts.l2:.4f}")
