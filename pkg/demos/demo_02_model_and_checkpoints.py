"""
LeNet and its binary checkpoint
===============================

The MNIST network: a fixed normalization layer, two convolution/pool stages
(5 and 16 kernels) and three dense layers ending in a softmax.
"""

import tempfile
from pathlib import Path

import numpy as np

from mmrb import build_lenet, load_checkpoint, save_checkpoint

model = build_lenet(seed=0)
for spec in model.layers:
    print(f"{spec.kind:10s} {spec.params}")
print()
for name, shape in model.param_shapes().items():
    print(f"{name:14s} {shape}")
print("parameters:", sum(int(np.prod(s)) for s in model.param_shapes().values()))

# Inputs are raw pixels in [0, 1]; the network normalizes them itself, so
# attack budgets are always expressed on the raw scale.
batch = np.random.default_rng(1).uniform(size=(4, 1, 28, 28)).astype(np.float32)
probs = model.forward(batch).data
print("row sums:", probs.sum(axis=1).round(6), "predictions:", model.predict(batch))

# The CIFAR10 variant takes three channels at side 32 without padding.
cifar = build_lenet(3, 32, (6, 16), padding=0)
print("CIFAR10 output:", cifar.forward(np.zeros((2, 3, 32, 32), dtype=np.float32)).shape)

# Checkpoints are a little-endian byte stream: magic, version, input shape,
# the layer table as JSON records, then each named float32 tensor.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "lenet.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    print("checkpoint bytes:", len(raw), "header:", raw[:4])
    again = load_checkpoint(path)
    print("same predictions after reload:", np.array_equal(again.forward(batch).data, probs))
