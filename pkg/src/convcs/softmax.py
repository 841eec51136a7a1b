"""Softmax classification on flattened convolutional feature planes.

Features come straight from the sparse-coding / reconstruction solvers
(they are produced during recovery anyway); each image contributes the
concatenation of its final feature planes in atom-major, row-major order.
The classifier is trained post hoc on frozen features by full-batch
gradient descent with a step-halving safeguard, after per-dimension
standardization fitted on the training set.

Model file layout ("SMAX1", little-endian):

    magic b"SMAX1" | C u32 | N_s u32 | mean float64[N_s] | std float64[N_s]
    | weights float64[C*N_s] row-major | bias float64[C]
"""

import struct
from dataclasses import dataclass

import numpy as np

from .csrecon import reconstruct_prelearned
from .dictionary_learning import SolverConfig, sparse_code

_MAGIC = b"SMAX1"


@dataclass
class SoftmaxModel:
    weights: np.ndarray        # (C, N_s)
    bias: np.ndarray           # (C,)
    feature_mean: np.ndarray   # (N_s,)
    feature_std: np.ndarray    # (N_s,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def n_features(self):
        return self.weights.shape[1]


def extract_features(dictionary, images=None, measurements=None, config=None):
    """Flattened final feature planes per image, (N, K*Hf*Wf).

    Uncompressed images run sparse coding with the frozen dictionary;
    measurements run the pre-learned reconstruction. Deterministic for a
    fixed config seed.
    """
    if (images is None) == (measurements is None):
        raise ValueError("pass exactly one of images= or measurements=")
    cfg = config or SolverConfig()
    if images is not None:
        result = sparse_code(dictionary, images, cfg)
    else:
        result = reconstruct_prelearned(measurements, dictionary, cfg)
    S = result.features
    return S.reshape(S.shape[0], -1)


def _standardize(features, mean, std):
    return (features - mean) / std


def softmax_probs(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_predict(model, features):
    """Class probabilities for one feature vector or an (N, N_s) batch."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != model.n_features:
        raise ValueError(
            f"feature length {x.shape[1]} != model N_s {model.n_features}")
    x = _standardize(x, model.feature_mean, model.feature_std)
    p = softmax_probs(x @ model.weights.T + model.bias)
    return p[0] if single else p


def predict_labels(model, features):
    return np.argmax(softmax_predict(model, np.atleast_2d(features)), axis=1)


def accuracy(model, features, labels):
    pred = predict_labels(model, features)
    return float(np.mean(pred == np.asarray(labels)))


def _loss_and_grad(X, Y, weights, bias, l2):
    n = X.shape[0]
    P = softmax_probs(X @ weights.T + bias)
    eps = 1e-300
    ll = -np.log(np.maximum(P[np.arange(n), Y.argmax(axis=1)], eps)).mean()
    loss = ll + 0.5 * l2 * float(np.sum(weights * weights))
    G = P - Y
    grad_w = G.T @ X / n + l2 * weights
    grad_b = G.mean(axis=0)
    return loss, grad_w, grad_b


def softmax_train(features, labels, n_classes=None, epochs=500, step=0.5,
                  l2=1e-4, min_step=1e-12):
    """Cross-entropy + (l2/2)||W||^2 by safeguarded full-batch descent.

    Any step that increases the loss is rolled back and the step halved,
    so the recorded loss trace is non-increasing. Requires at least two
    classes, each represented at least once. Returns (model, loss_trace).
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"features {X.shape} do not match labels {y.shape}")
    C = int(n_classes) if n_classes is not None else int(y.max()) + 1
    present = np.unique(y)
    if present.min() < 0 or present.max() >= C:
        raise ValueError(f"labels outside [0, {C})")
    if len(present) < 2:
        raise ValueError("training needs at least two represented classes")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    Y = np.zeros((X.shape[0], C))
    Y[np.arange(X.shape[0]), y] = 1.0

    W = np.zeros((C, X.shape[1]))
    b = np.zeros(C)
    loss, gw, gb = _loss_and_grad(Xs, Y, W, b, l2)
    trace = [loss]
    for _ in range(int(epochs)):
        if step < min_step:
            break
        W_new = W - step * gw
        b_new = b - step * gb
        new_loss, new_gw, new_gb = _loss_and_grad(Xs, Y, W_new, b_new, l2)
        if new_loss > loss:
            step *= 0.5
            trace.append(loss)
            continue
        W, b, loss, gw, gb = W_new, b_new, new_loss, new_gw, new_gb
        trace.append(loss)
    model = SoftmaxModel(weights=W, bias=b, feature_mean=mean, feature_std=std)
    return model, trace


def save_softmax(model, path):
    C, ns = model.weights.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", C, ns))
        fh.write(model.feature_mean.astype("<f8").tobytes())
        fh.write(model.feature_std.astype("<f8").tobytes())
        fh.write(model.weights.astype("<f8").tobytes(order="C"))
        fh.write(model.bias.astype("<f8").tobytes())


def load_softmax(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != _MAGIC:
        raise ValueError(f"bad model magic {data[:5]!r}, expected {_MAGIC!r}")
    C, ns = struct.unpack_from("<II", data, 5)
    offset = 5 + 8
    mean = np.frombuffer(data, dtype="<f8", count=ns, offset=offset)
    offset += ns * 8
    std = np.frombuffer(data, dtype="<f8", count=ns, offset=offset)
    offset += ns * 8
    W = np.frombuffer(data, dtype="<f8", count=C * ns, offset=offset).reshape(C, ns)
    offset += C * ns * 8
    bias = np.frombuffer(data, dtype="<f8", count=C, offset=offset)
    return SoftmaxModel(weights=W.copy(), bias=bias.copy(),
                        feature_mean=mean.copy(), feature_std=std.copy())
