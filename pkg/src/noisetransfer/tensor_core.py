"""Dense forward passes and exact input gradients for small MLP classifiers.

Tensors are plain ``numpy.float64`` arrays. Every function accepts either a
single example (1-D input) or a batch (2-D, examples along axis 0); batched
calls return per-example results.
"""

import numpy as np

from noisetransfer.errors import ValidationError

ACTIVATIONS = ("relu", "tanh")


def as_tensor(values, name="tensor"):
    """Return ``values`` as a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} produced non-finite values")
    return arr


def affine_forward(x, weights, bias):
    """Compute ``weights @ x + bias`` (row-wise for a batch)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1:] != (weights.shape[1],):
        raise ValidationError(
            f"shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return _check_finite(x @ weights.T + bias, "affine_forward")


def activation(t, kind):
    t = np.asarray(t, dtype=np.float64)
    if kind == "relu":
        return np.maximum(t, 0.0)
    if kind == "tanh":
        return np.tanh(t)
    raise ValidationError(f"unsupported activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_derivative(pre, kind):
    # relu'(0) = 0 by convention
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(pre) ** 2
    raise ValidationError(f"unsupported activation {kind!r}; expected one of {ACTIVATIONS}")


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_one_hot(y, num_classes=None):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2) or y.shape[-1] < 2:
        raise ValidationError(f"one-hot label must have at least 2 classes, got shape {y.shape}")
    if num_classes is not None and y.shape[-1] != num_classes:
        raise ValidationError(f"label has {y.shape[-1]} classes, expected {num_classes}")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise ValidationError("label is not one-hot")
    return y


def one_hot(labels, num_classes):
    """Encode integer class indices as one-hot rows."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes, dtype=np.float64)[labels]


def softmax_cross_entropy(logits, y):
    """Cross-entropy of ``softmax(logits)`` against one-hot ``y``.

    Returns a float for a single example and an array of per-example losses
    for a batch. Uses the shifted log-sum-exp so large logits cannot overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = check_one_hot(y)
    if logits.shape != y.shape:
        raise ValidationError(f"logits shape {logits.shape} does not match label shape {y.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loss = lse - (z * y).sum(axis=-1)
    if loss.ndim == 0:
        return float(loss)
    return loss


def mlp_forward(weights, biases, kind, x, trace=False):
    """Run ``x`` through the layers; the last layer is left linear (logits).

    With ``trace=True`` also returns the list of layer inputs and the list of
    hidden pre-activations, which the backward passes need.
    """
    h = np.asarray(x, dtype=np.float64)
    inputs, pres = [], []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        pre = affine_forward(h, w, b)
        if i < last:
            pres.append(pre)
            h = activation(pre, kind)
        else:
            h = pre
    if trace:
        return h, inputs, pres
    return h


def logits_grad(logits, y):
    """Gradient of the cross-entropy with respect to the logits, ``p - y``."""
    return softmax(logits) - y


def backprop_input(weights, kind, pres, grad_logits):
    """Propagate ``grad_logits`` back to the network input."""
    g = grad_logits
    for i in range(len(weights) - 1, -1, -1):
        g = g @ weights[i]
        if i > 0:
            g = g * activation_derivative(pres[i - 1], kind)
    return g


def loss_input_grad(model, x, y):
    """Exact gradient of the cross-entropy loss with respect to the input.

    ``model`` needs ``weights``, ``biases`` and ``activation`` attributes.
    For a batch, row ``i`` of the result is the gradient of example ``i``'s
    own loss.
    """
    x = np.asarray(x, dtype=np.float64)
    d_in = model.weights[0].shape[1]
    if x.shape[-1:] != (d_in,) or x.ndim not in (1, 2):
        raise ValidationError(f"input shape {x.shape} does not match model input dimension {d_in}")
    y = check_one_hot(y, num_classes=model.weights[-1].shape[0])
    logits, _, pres = mlp_forward(model.weights, model.biases, model.activation, x, trace=True)
    if logits.shape != y.shape:
        raise ValidationError(f"label shape {y.shape} does not match logits shape {logits.shape}")
    g = backprop_input(model.weights, model.activation, pres, logits_grad(logits, y))
    return _check_finite(g, "loss_input_grad")


def model_loss(model, x, y):
    """Cross-entropy of ``model`` at ``x`` (scalar or per-example array)."""
    logits = mlp_forward(model.weights, model.biases, model.activation, x)
    return softmax_cross_entropy(logits, y)


def finite_difference_grad(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at 1-D ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return grad


def relative_error(a, b):
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
