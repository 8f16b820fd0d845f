"""Cost-sensitive adversarial robustness toolkit on a small numpy autodiff engine."""

from .tensor import Tensor, backward, grad, no_grad, default_dtype
from .model import Model, build_lenet, load_checkpoint, save_checkpoint, predict
from .losses import CostMatrix, LossConfig, composite_loss, cost_term, cross_entropy, fuzziness, l2_penalty
from .attacks import AttackSpec, AdversarialBatch, attack
from .data import Dataset, load_mnist, load_cifar10, batches
from .training import TrainPlan, train, evaluate_clean

__version__ = "0.1.0"
