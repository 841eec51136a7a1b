"""Compressive sensing operators: dense Gaussian and permuted Hadamard.

Images are vectorized column-major (Fortran order) throughout the package;
the choice is arbitrary because the operators are random, but it is fixed
globally so measurement files stay interchangeable.

Operators are pure functions of (M, N, seed) and are persisted by seed
only (never as dense matrices): binary layout

    magic b"CSAOP1" | variant u8 (1=gaussian, 2=hadamard) | M u32 | N u32
    | seed u64        (all little-endian)
"""

import struct

import numpy as np

from ._util import substream_rng

_MAGIC = b"CSAOP1"
_VARIANT_TAGS = {"dense-gaussian": 1, "permuted-hadamard": 2}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}


def vectorize_image(image):
    """Flatten an (H, W) image column-major into a length H*W vector."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValueError(f"expected single-channel image, got shape {image.shape}")
    return image.flatten(order="F")


def unvectorize_image(vec, shape):
    """Inverse of vectorize_image for a target (H, W) shape."""
    H, W = shape
    return np.asarray(vec).reshape((H, W), order="F")


def vectorize_batch(images):
    """(N, H, W) -> (N, H*W), column-major per image."""
    images = np.asarray(images)
    n, h, w = images.shape
    return images.transpose(0, 2, 1).reshape(n, h * w)


def unvectorize_batch(vecs, shape):
    """(N, H*W) -> (N, H, W), column-major per image."""
    h, w = shape
    n = vecs.shape[0]
    return vecs.reshape(n, w, h).transpose(0, 2, 1)


def fwht(x):
    """Fast Walsh-Hadamard transform (Sylvester/natural order) over the last axis.

    Computes H_N @ x without the 1/sqrt(N) scaling; N must be a power of two.
    """
    x = np.array(x, dtype=np.float64)
    n = x.shape[-1]
    if n & (n - 1) or n == 0:
        raise ValueError(f"FWHT length must be a power of two, got {n}")
    h = 1
    lead = x.shape[:-1]
    while h < n:
        x = x.reshape(lead + (n // (2 * h), 2, h))
        top = x[..., 0, :] + x[..., 1, :]
        bot = x[..., 0, :] - x[..., 1, :]
        x = np.concatenate((top[..., None, :], bot[..., None, :]), axis=-2)
        h *= 2
    return x.reshape(lead + (n,))


class SensingOperator:
    """Base class: y = A x with x length N, y length M, plus the adjoint."""

    variant = None

    def __init__(self, M, N, seed):
        if not 1 <= M <= N:
            raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
        self.M = int(M)
        self.N = int(N)
        self.seed = int(seed)

    def apply(self, x):
        """A @ x over the last axis; accepts (N,) or (batch, N)."""
        raise NotImplementedError

    def apply_adj(self, y):
        """A.T @ y over the last axis; accepts (M,) or (batch, M)."""
        raise NotImplementedError

    def as_matrix(self):
        """Dense M x N materialization (small problems and tests only)."""
        eye = np.eye(self.N)
        return self.apply(eye).T

    def _check_last(self, v, expect, what):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != expect:
            raise ValueError(f"{what} length {v.shape[-1]}, operator expects {expect}")
        return v


class GaussianOperator(SensingOperator):
    """Dense i.i.d. Gaussian matrix with unit-norm columns."""

    variant = "dense-gaussian"

    def __init__(self, M, N, seed):
        super().__init__(M, N, seed)
        rng = substream_rng(seed, "operator")
        A = rng.standard_normal((self.M, self.N))
        A /= np.linalg.norm(A, axis=0, keepdims=True)
        self.matrix = A

    def apply(self, x):
        x = self._check_last(x, self.N, "input")
        return x @ self.matrix.T

    def apply_adj(self, y):
        y = self._check_last(y, self.M, "measurement")
        return y @ self.matrix

    def as_matrix(self):
        return self.matrix


class PermutedHadamardOperator(SensingOperator):
    """A = R H P / sqrt(N): random rows of a column-permuted Hadamard matrix.

    H is the order-N Sylvester Hadamard matrix, P a seeded column
    permutation, R a seeded selection of M distinct rows (uniform, without
    replacement). Applied matrix-free via the FWHT; under the 1/sqrt(N)
    scaling the rows are orthonormal, so A A^T = I_M.
    """

    variant = "permuted-hadamard"

    def __init__(self, M, N, seed):
        if N & (N - 1) or N == 0:
            raise ValueError(f"Hadamard order must be a power of two, got N={N}")
        super().__init__(M, N, seed)
        rng = substream_rng(seed, "operator")
        self.col_perm = rng.permutation(self.N)
        self.row_ids = rng.choice(self.N, size=self.M, replace=False)
        self._scale = 1.0 / np.sqrt(self.N)
        self._inv_perm = np.argsort(self.col_perm)

    def apply(self, x):
        x = self._check_last(x, self.N, "input")
        hx = fwht(x[..., self.col_perm])
        return hx[..., self.row_ids] * self._scale

    def apply_adj(self, y):
        y = self._check_last(y, self.M, "measurement")
        full = np.zeros(y.shape[:-1] + (self.N,))
        full[..., self.row_ids] = y
        # H is symmetric and P^T reindexes by the inverse permutation
        return fwht(full)[..., self._inv_perm] * self._scale


def make_gaussian(M, N, seed):
    return GaussianOperator(M, N, seed)


def make_permuted_hadamard(M, N, seed):
    return PermutedHadamardOperator(M, N, seed)


def measurement_count(csr, image_pixels):
    """Rows of A for a sensing ratio: M = round(csr * N), at least 1."""
    if not 0 < csr <= 1:
        raise ValueError(f"csr must be in (0, 1], got {csr}")
    return max(1, int(np.floor(csr * image_pixels + 0.5)))


def save_operator(op, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BIIQ", _VARIANT_TAGS[op.variant], op.M, op.N, op.seed))


def load_operator(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return operator_from_bytes(data)[0]


def operator_to_bytes(op):
    return _MAGIC + struct.pack("<BIIQ", _VARIANT_TAGS[op.variant], op.M, op.N, op.seed)


def operator_from_bytes(data, offset=0):
    """Parse a CSAOP1 record; returns (operator, bytes consumed)."""
    if data[offset:offset + 6] != _MAGIC:
        raise ValueError(f"bad operator magic {data[offset:offset + 6]!r}, expected {_MAGIC!r}")
    tag, M, N, seed = struct.unpack_from("<BIIQ", data, offset + 6)
    if tag not in _TAG_VARIANTS:
        raise ValueError(f"unknown operator variant tag {tag}")
    cls = GaussianOperator if tag == 1 else PermutedHadamardOperator
    return cls(M, N, seed), 6 + struct.calcsize("<BIIQ")
