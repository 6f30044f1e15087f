from rangepdm.nn.layers import BatchNorm, Classifier, Linear, MlpBlock, Module
from rangepdm.nn.losses import cross_entropy
from rangepdm.nn.optim import AdamW
from rangepdm.nn.tensor import Tensor, backward, no_grad

__all__ = [
    "Tensor", "backward", "no_grad", "Module", "Linear", "BatchNorm",
    "MlpBlock", "Classifier", "cross_entropy", "AdamW",
]
