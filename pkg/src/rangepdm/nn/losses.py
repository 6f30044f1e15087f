import numpy as np

from rangepdm.nn.tensor import Tensor, _make, as_tensor


def cross_entropy(logits, targets, ignore: int = 0) -> Tensor:
    """Mean negative log-softmax over rows whose target is not ``ignore``.

    With every row ignored the loss is 0 and all gradients are 0.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be M x C, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, c = logits.shape
    if targets.shape[0] != m:
        raise ValueError(f"cross_entropy: {targets.shape[0]} targets for {m} rows")
    keep = targets != ignore
    if keep.any() and (targets[keep].max() >= c or targets[keep].min() < 0):
        raise ValueError(f"cross_entropy: target outside [0, {c})")
    rows = np.nonzero(keep)[0]
    count = rows.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    if count:
        value = float(np.sum(lse[rows] - z[rows, targets[rows]]) / count)
    else:
        value = 0.0

    def bw(g):
        grad = np.zeros((m, c))
        if count:
            p = np.exp(z[rows] - lse[rows, None])
            p[np.arange(count), targets[rows]] -= 1.0
            grad[rows] = p / count
        logits._accum(grad * g)

    return _make(np.array(value), (logits,), bw, "cross_entropy")
