"""Image recovery from compressed measurements y = A x.

Two modes: the convolutional dictionary is supplied (pre-learned on other
data) or it is learned in situ from the measurements themselves by
interleaving dictionary gradient steps with the feature/shrinkage/dual
cycle. Either way the recovered image is the synthesis of the final
feature planes through the dictionary.

Measurement file layout ("CSMEAS1", little-endian):

    magic b"CSMEAS1" | N u32 | M u32 | H u32 | W u32 | C u32
    | operator record (CSAOP1) | N*M float64, image-major
"""

import struct
from dataclasses import dataclass

import numpy as np

from ._engine import run_admm, cg_batched
from ._util import as_image_stack
from . import conv_ops
from .dictionary_learning import (
    ConvDictionary,
    SolverConfig,
    _atoms_of,
    init_dictionary,
    synthesize_batch,
)
from .sensing import (
    operator_from_bytes,
    operator_to_bytes,
    unvectorize_image,
    vectorize_batch,
    vectorize_image,
)

_MAGIC = b"CSMEAS1"


@dataclass
class MeasurementSet:
    """Compressed measurements plus the operator and target image geometry."""

    y: np.ndarray                # (N, M)
    operator: object             # SensingOperator
    image_shape: tuple           # (H, W) or (H, W, C)

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if not np.all(np.isfinite(self.y)):
            raise ValueError("measurements contain non-finite entries")
        if self.y.shape[1] != self.operator.M:
            raise ValueError(
                f"measurement length {self.y.shape[1]} != operator M {self.operator.M}")
        shape = tuple(int(s) for s in self.image_shape)
        if len(shape) == 2:
            shape = shape + (1,)
        self.image_shape = shape
        if shape[0] * shape[1] != self.operator.N:
            raise ValueError(
                f"image pixels {shape[0] * shape[1]} != operator N {self.operator.N}")

    @property
    def n_images(self):
        return self.y.shape[0]


@dataclass
class ReconstructionResult:
    images: np.ndarray           # (N, H, W, C)
    features: np.ndarray         # (N, K, Hf, Wf)
    dictionary: ConvDictionary
    trace: list                  # TraceRow per iteration; recon_err is the
                                 # relative measurement error
    iterations: int
    converged: bool
    cg_failures: int

    def rel_measurement_errors(self, measurements):
        """Final per-image relative measurement error |y - A x|/|y|."""
        op = measurements.operator
        H, W, _ = measurements.image_shape
        yhat = op.apply(vectorize_batch(self.images[..., 0]))
        num = np.linalg.norm(measurements.y - yhat, axis=1)
        den = np.linalg.norm(measurements.y, axis=1)
        return num / np.where(den > 0, den, 1.0)


def measure_images(images, operator):
    """Apply a sensing operator to a stack of images."""
    X = as_image_stack(images)
    if X.shape[3] != 1:
        raise ValueError("sensing expects single-channel images")
    y = operator.apply(vectorize_batch(X[..., 0]))
    return MeasurementSet(y=y, operator=operator, image_shape=X.shape[1:])


def synthesize(dictionary, features):
    """Image synthesis sum_k D_k * S_k for one image or a batch."""
    return synthesize_batch(_atoms_of(dictionary), features)


def feature_cg_solve_cs(dictionary, k, operator, y_residual_excluding_k,
                        z, u, eta, image_shape, cg_tol=1e-6, cg_max_iter=200,
                        x0=None):
    """Solve (T_k^T A^T A T_k + eta I) s = T_k^T A^T y_excl + eta (z - u).

    Matrix-free CG through the composed operator. Returns (s, info) with
    info 0 on convergence, else the iteration count reached.
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    atoms = _atoms_of(dictionary)
    if atoms.shape[3] != 1:
        raise ValueError("compressed solving supports single-channel atoms only")
    H, W = image_shape[0], image_shape[1]
    h, w = atoms.shape[1:3]
    atom = atoms[k, :, :, 0]
    back = unvectorize_image(operator.apply_adj(np.asarray(y_residual_excluding_k,
                                                           dtype=np.float64)), (H, W))
    rhs = conv_ops.apply_T_adj(atom, back)
    rhs += eta * (np.asarray(z, dtype=np.float64) - np.asarray(u, dtype=np.float64))

    def op(sf):
        s2 = sf[0].reshape(rhs.shape)
        img = conv_ops.apply_T(atom, s2)
        v = operator.apply_adj(operator.apply(vectorize_image(img)))
        feat = conv_ops.apply_T_adj(atom, unvectorize_image(v, (H, W)))
        return (feat + eta * s2).reshape(1, -1)

    start = np.zeros_like(rhs) if x0 is None else np.asarray(x0, dtype=np.float64)
    sol, conv, iters, _ = cg_batched(op, rhs.reshape(1, -1), start.reshape(1, -1),
                                     cg_tol, cg_max_iter)
    return sol.reshape(rhs.shape), 0 if bool(conv[0]) else iters


def dict_gradient_step_cs(dictionary, operator, measurements, features, beta,
                          image_shape):
    """One measurement-domain gradient step on every atom (common snapshot).

    d_k <- d_k + beta * sum_n F_{k,n}^T A^T (y_n - A sum_k' F_{k',n} d_k').
    """
    atoms = _atoms_of(dictionary).copy()
    Y = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    S = np.asarray(features, dtype=np.float64)
    H, W = image_shape[0], image_shape[1]
    K = atoms.shape[0]
    for n in range(Y.shape[0]):
        xhat = conv_ops.synthesize_atoms(atoms[:, :, :, 0], S[n])
        resid_m = Y[n] - operator.apply(vectorize_image(xhat))
        back = unvectorize_image(operator.apply_adj(resid_m), (H, W))
        for k in range(K):
            atoms[k, :, :, 0] += beta * conv_ops.apply_F_adj(S[n, k], back)
    if not np.all(np.isfinite(atoms)):
        raise ValueError("non-finite dictionary after gradient step")
    if isinstance(dictionary, ConvDictionary):
        return ConvDictionary(atoms, layer=dictionary.layer)
    return atoms


def reconstruct_prelearned(measurements, dictionary, config=None):
    """Recover images from measurements with a fixed dictionary."""
    cfg = (config or SolverConfig()).resolved("zero")
    atoms = _atoms_of(dictionary)
    res = run_admm(atoms=atoms, config=cfg, measurements=measurements.y,
                   operator=measurements.operator,
                   image_shape=measurements.image_shape,
                   learn_dictionary=False)
    return _pack(res, layer=getattr(dictionary, "layer", 1))


def reconstruct_insitu(measurements, n_atoms, kernel_size, config=None):
    """Recover images while learning the dictionary from the measurements.

    The dictionary starts from the seeded random initialization and takes
    one gradient step per outer iteration before the feature cycle, per
    the D, S, Z, U update order. Features default to the backprojection
    warm start (config.feature_init="zero" mirrors an all-zero start).
    """
    cfg = (config or SolverConfig()).resolved("backprojection")
    D0 = init_dictionary(n_atoms, kernel_size, n_channels=1, seed=cfg.seed)
    res = run_admm(atoms=D0.atoms, config=cfg, measurements=measurements.y,
                   operator=measurements.operator,
                   image_shape=measurements.image_shape,
                   learn_dictionary=True)
    return _pack(res, layer=1)


def _pack(res, layer):
    D = ConvDictionary(res.atoms, layer=layer)
    images = synthesize_batch(res.atoms, res.S)
    return ReconstructionResult(images=images, features=res.S, dictionary=D,
                                trace=res.trace, iterations=res.iterations,
                                converged=res.converged,
                                cg_failures=res.cg_failures)


def save_measurements(measurements, path):
    ms = measurements
    H, W, C = ms.image_shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", ms.n_images, ms.y.shape[1], H, W, C))
        fh.write(operator_to_bytes(ms.operator))
        fh.write(ms.y.astype("<f8").tobytes(order="C"))


def load_measurements(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:7] != _MAGIC:
        raise ValueError(f"bad measurement magic {data[:7]!r}, expected {_MAGIC!r}")
    N, M, H, W, C = struct.unpack_from("<IIIII", data, 7)
    offset = 7 + struct.calcsize("<IIIII")
    operator, used = operator_from_bytes(data, offset)
    offset += used
    y = np.frombuffer(data, dtype="<f8", count=N * M, offset=offset).reshape(N, M)
    return MeasurementSet(y=y.copy(), operator=operator, image_shape=(H, W, C))
