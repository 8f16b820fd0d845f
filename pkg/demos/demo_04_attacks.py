"""
White-box attacks
=================

All six attack families against a small network trained for a few epochs
on synthetic images. Every adversarial batch is checked against its
budget and the [0, 1] pixel box before it is returned.
"""

import numpy as np

from mmrb import AttackSpec, LossConfig, TrainPlan, attack, build_lenet, train
from mmrb.attacks import CWParams
from mmrb.data import synthetic_dataset

train_set = synthetic_dataset(400, side=12, seed=0)
test_set = synthetic_dataset(100, side=12, seed=0, split="test")
model = build_lenet(1, 12, (3, 4), 2, (16, 12), 10, seed=0, kernel=3)
model, _ = train(TrainPlan("std", epochs=15, batch_size=32, lr=0.02, momentum=0.9, loss=LossConfig("std")), model, train_set)

x, y = test_set.images, test_set.labels
print("clean accuracy:", float((model.predict(x) == y).mean()))

for family, eps in (("fgsm", 0.1), ("pgd", 0.1), ("bim_linf", 0.1), ("mim", 0.1), ("bim_l2", 1.0), ("cw", None)):
    spec = AttackSpec.default(family, eps, cw=CWParams(iterations=50, constant=5.0, lr=0.05))
    res = attack(model, x, y, spec, rng=np.random.default_rng(0))
    d = (res.adversarials - x).reshape(len(x), -1)
    print(f"{family:9s} eps={str(eps):5s} success={res.success.mean():.2f} "
          f"max|d|={np.abs(d).max():.3f} mean L2={np.linalg.norm(d, axis=1).mean():.3f}")

# One projected step from a clean start is the fast gradient sign method.
one = AttackSpec("pgd", 0.1, steps=1, step_size=0.1, random_start=False)
same = np.array_equal(attack(model, x, y, one).adversarials, attack(model, x, y, AttackSpec("fgsm", 0.1)).adversarials)
print("single-step PGD equals FGSM:", same)
