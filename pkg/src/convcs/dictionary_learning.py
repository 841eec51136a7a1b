"""Convolutional dictionary learning by ADMM on uncompressed images.

Each image X_n is modeled as a sum over atoms of D_k convolved with a
sparse feature plane S_{k,n}; the solver alternates a gradient step on the
dictionary, per-atom conjugate-gradient feature solves, adaptive
soft-thresholding of the auxiliary variable, and the scaled dual update.

Dictionary file layout ("CFAD1", little-endian):

    magic b"CFAD1" | version u8 | layer u8 | K u32 | h u32 | w u32 | C u32
    | K*h*w*C float64, atom-major then row-major
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import conv_ops
from ._engine import DivergenceError, EngineResult, cg_batched, run_admm
from ._util import as_atom_stack, as_image_stack, substream_rng

_MAGIC = b"CFAD1"
_VERSION = 1

__all__ = [
    "ConvDictionary", "SolverConfig", "DivergenceError", "TrainResult",
    "shrink", "adaptive_threshold", "dual_update", "dict_gradient_step",
    "feature_cg_solve", "train_dictionary", "sparse_code",
    "save_dictionary", "load_dictionary", "init_dictionary",
]


@dataclass
class ConvDictionary:
    """K convolutional filters of shape (h, w, C) for one model layer."""

    atoms: np.ndarray
    layer: int = 1

    def __post_init__(self):
        self.atoms = as_atom_stack(self.atoms)
        if self.layer < 1:
            raise ValueError(f"layer index must be >= 1, got {self.layer}")

    @property
    def n_atoms(self):
        return self.atoms.shape[0]

    @property
    def kernel_shape(self):
        return self.atoms.shape[1:3]

    @property
    def n_channels(self):
        return self.atoms.shape[3]

    def feature_shape(self, image_shape):
        """Feature-plane size paired with an (H, W) image."""
        H, W = image_shape[0], image_shape[1]
        h, w = self.kernel_shape
        if h > H or w > W:
            raise ValueError(f"kernel ({h}, {w}) larger than image ({H}, {W})")
        return (H + h - 1, W + w - 1)


@dataclass
class SolverConfig:
    """Knobs shared by the trainer and the CS reconstructors.

    beta is the dictionary learning rate (scale-sensitive: the shipped
    default suits [0, 1] pixel data at MNIST scale). eta ramps
    geometrically from eta0 to eta_max across outer iterations.
    sparsity_target is the fraction of feature elements kept nonzero per
    image by the adaptive threshold.
    """

    beta: float = 1e-7
    eta0: float = 1e-3
    eta_max: float = 5.0
    eta_growth: float = 1.1
    max_outer: int = 200
    rel_tol: float = 1e-5
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    sparsity_target: float = 0.05
    seed: int = 0
    # "auto": zero start everywhere except in-situ CS, which warm-starts
    # from the scaled backprojection of the measurements
    feature_init: str = "auto"          # "auto" | "zero" | "backprojection"
    renormalize_atoms: bool = False
    threads: int = 1
    batch_size: int = 500               # chunking for frozen-dictionary coding

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 < self.eta0 <= self.eta_max:
            raise ValueError(f"need 0 < eta0 <= eta_max, got {self.eta0}, {self.eta_max}")
        if self.eta_growth < 1:
            raise ValueError(f"eta_growth must be >= 1, got {self.eta_growth}")
        if not 0 < self.sparsity_target <= 1:
            raise ValueError(f"sparsity_target must be in (0, 1], got {self.sparsity_target}")
        if self.cg_tol <= 0:
            raise ValueError(f"cg_tol must be > 0, got {self.cg_tol}")
        if self.feature_init not in ("auto", "zero", "backprojection"):
            raise ValueError(f"unknown feature_init {self.feature_init!r}")

    def resolved(self, default_init):
        """Copy with feature_init="auto" pinned to the caller's default."""
        if self.feature_init != "auto":
            return self
        return replace(self, feature_init=default_init)


@dataclass
class TrainResult:
    dictionary: ConvDictionary
    features: np.ndarray        # (N, K, Hf, Wf) final S
    sparse_features: np.ndarray  # (N, K, Hf, Wf) final Z
    trace: list                 # TraceRow per outer iteration
    iterations: int
    converged: bool
    cg_failures: int
    images: np.ndarray          # (N, H, W, C) final synthesis


def shrink(v, gamma):
    """Soft thresholding sign(v) * max(|v| - gamma, 0), element-wise."""
    v = np.asarray(v)
    return np.sign(v) * np.maximum(np.abs(v) - gamma, 0.0)


def adaptive_threshold(values, target_nonzeros):
    """Threshold that keeps a fixed number of entries after shrinkage.

    Returns the magnitude of the (target+1)-th largest |value| (0 when the
    target covers every element), so soft thresholding leaves exactly
    `target_nonzeros` nonzeros absent ties and at most that many with ties.
    """
    flat = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    n = flat.size
    if target_nonzeros < 0 or target_nonzeros > n:
        raise ValueError(f"target_nonzeros {target_nonzeros} outside [0, {n}]")
    if target_nonzeros == n:
        return 0.0
    return float(np.partition(flat, n - target_nonzeros - 1)[n - target_nonzeros - 1])


def dual_update(U, S, Z, eta):
    """Scaled dual ascent U + eta * (S - Z)."""
    return np.asarray(U) + eta * (np.asarray(S) - np.asarray(Z))


def _atoms_of(dictionary):
    if isinstance(dictionary, ConvDictionary):
        return dictionary.atoms
    return as_atom_stack(dictionary)


def dict_gradient_step(dictionary, images, features, beta):
    """One gradient step on every atom from a common pre-step state.

    d_k <- d_k + beta * sum_n F_{k,n}^T (x_n - sum_k' D_k' * S_{k',n});
    the per-atom residual excluding k collapses to the full residual, so
    all atoms see the same snapshot.
    """
    atoms = _atoms_of(dictionary).copy()
    X = as_image_stack(images)
    S = np.asarray(features, dtype=np.float64)
    K, h, w, C = atoms.shape
    N = X.shape[0]
    for n in range(N):
        resid = X[n] - conv_ops.synthesize_atoms(atoms, S[n])
        for k in range(K):
            for c in range(C):
                g = conv_ops.apply_F_adj(S[n, k], resid[:, :, c])
                atoms[k, :, :, c] += beta * g
    if not np.all(np.isfinite(atoms)):
        raise DivergenceError("non-finite dictionary after gradient step")
    if isinstance(dictionary, ConvDictionary):
        return ConvDictionary(atoms, layer=dictionary.layer)
    return atoms


def feature_cg_solve(dictionary, k, residual_excluding_k, z, u, eta,
                     cg_tol=1e-6, cg_max_iter=200, x0=None):
    """Solve (T_k^T T_k + eta I) s = T_k^T x_excl + eta (z - u) by CG.

    residual_excluding_k is the image minus the synthesis of every other
    atom, shaped (H, W) or (H, W, C). Returns (s, info) where info is 0 on
    convergence to the relative-residual tolerance and otherwise the
    iteration count reached (the best iterate is still returned).
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    atoms = _atoms_of(dictionary)
    x_excl = np.asarray(residual_excluding_k, dtype=np.float64)
    if x_excl.ndim == 2:
        x_excl = x_excl[:, :, None]
    K, h, w, C = atoms.shape
    rhs = np.zeros((x_excl.shape[0] + h - 1, x_excl.shape[1] + w - 1))
    for c in range(C):
        rhs += conv_ops.apply_T_adj(atoms[k, :, :, c], x_excl[:, :, c])
    rhs += eta * (np.asarray(z, dtype=np.float64) - np.asarray(u, dtype=np.float64))

    def op(sf):
        s2 = sf.reshape(rhs.shape)
        acc = np.zeros_like(s2)
        for c in range(C):
            img = conv_ops.apply_T(atoms[k, :, :, c], s2)
            acc += conv_ops.apply_T_adj(atoms[k, :, :, c], img)
        return (acc + eta * s2).reshape(1, -1)

    start = np.zeros_like(rhs) if x0 is None else np.asarray(x0, dtype=np.float64)
    sol, conv, iters, _ = cg_batched(lambda v: op(v[0]),
                                     rhs.reshape(1, -1), start.reshape(1, -1),
                                     cg_tol, cg_max_iter)
    return sol.reshape(rhs.shape), 0 if bool(conv[0]) else iters


def init_dictionary(n_atoms, kernel_size, n_channels=1, seed=0, layer=1):
    """Random unit-Frobenius atoms drawn from the dict_init sub-stream."""
    h, w = _kernel_pair(kernel_size)
    rng = substream_rng(seed, "dict_init")
    atoms = rng.standard_normal((n_atoms, h, w, n_channels))
    norms = np.sqrt(np.einsum("khwc,khwc->k", atoms, atoms))
    atoms /= norms[:, None, None, None]
    return ConvDictionary(atoms, layer=layer)


def _kernel_pair(kernel_size):
    if np.isscalar(kernel_size):
        return int(kernel_size), int(kernel_size)
    h, w = kernel_size
    return int(h), int(w)


def train_dictionary(images, n_atoms, kernel_size, config=None):
    """Learn a convolutional dictionary from images (ADMM alternation).

    Runs dictionary gradient steps, sequential per-atom CG feature solves,
    adaptive soft-thresholding and dual updates until `config.max_outer`
    iterations or relative reconstruction error below `config.rel_tol`.
    Returns a TrainResult; its trace rows carry (iter, objective,
    recon_err, primal_residual, eta).
    """
    cfg = (config or SolverConfig()).resolved("zero")
    X = as_image_stack(images)
    if X.shape[0] < 1:
        raise ValueError("need at least one image")
    D0 = init_dictionary(n_atoms, kernel_size, n_channels=X.shape[3],
                         seed=cfg.seed)
    res = run_admm(atoms=D0.atoms, config=cfg, images=X,
                   learn_dictionary=cfg.beta > 0)
    return _pack_result(res, layer=1)


def sparse_code(dictionary, images, config=None):
    """Convolutional sparse coding with a frozen dictionary.

    Identical ADMM cycle with the dictionary step skipped. Images are
    processed in chunks of `config.batch_size` (their subproblems are
    independent once the dictionary is fixed).
    """
    cfg = (config or SolverConfig()).resolved("zero")
    X = as_image_stack(images)
    atoms = _atoms_of(dictionary)
    chunks = []
    n = X.shape[0]
    step = max(1, int(cfg.batch_size))
    for lo in range(0, n, step):
        res = run_admm(atoms=atoms, config=cfg, images=X[lo:lo + step],
                       learn_dictionary=False)
        chunks.append(res)
    merged = _merge_chunks(chunks, atoms)
    return _pack_result(merged, layer=getattr(dictionary, "layer", 1))


def _merge_chunks(chunks, atoms):
    if len(chunks) == 1:
        return chunks[0]
    return EngineResult(
        atoms=atoms,
        S=np.concatenate([c.S for c in chunks]),
        Z=np.concatenate([c.Z for c in chunks]),
        U=np.concatenate([c.U for c in chunks]),
        trace=chunks[0].trace,
        iterations=max(c.iterations for c in chunks),
        converged=all(c.converged for c in chunks),
        cg_failures=sum(c.cg_failures for c in chunks),
    )


def _pack_result(res, layer):
    D = ConvDictionary(res.atoms, layer=layer)
    images = synthesize_batch(res.atoms, res.S)
    return TrainResult(dictionary=D, features=res.S, sparse_features=res.Z,
                       trace=res.trace, iterations=res.iterations,
                       converged=res.converged, cg_failures=res.cg_failures,
                       images=images)


def synthesize_batch(atoms, features):
    """Per-image synthesis through the plain conv path: (N,K,Hf,Wf) -> (N,H,W,C)."""
    atoms = _atoms_of(atoms)
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 3
    if single:
        features = features[None]
    out = np.stack([conv_ops.synthesize_atoms(atoms, f) for f in features])
    return out[0] if single else out


def save_dictionary(dictionary, path):
    atoms = dictionary.atoms
    K, h, w, C = atoms.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBIIII", _VERSION, dictionary.layer, K, h, w, C))
        fh.write(atoms.astype("<f8").tobytes(order="C"))


def load_dictionary(path):
    with open(path, "rb") as fh:
        data = fh.read()
    d, _ = dictionary_from_bytes(data)
    return d


def dictionary_to_bytes(dictionary):
    atoms = dictionary.atoms
    K, h, w, C = atoms.shape
    return (_MAGIC + struct.pack("<BBIIII", _VERSION, dictionary.layer, K, h, w, C)
            + atoms.astype("<f8").tobytes(order="C"))


def dictionary_from_bytes(data, offset=0):
    """Parse a CFAD1 record; returns (ConvDictionary, bytes consumed)."""
    if data[offset:offset + 5] != _MAGIC:
        raise ValueError(f"bad dictionary magic {data[offset:offset + 5]!r}, "
                         f"expected {_MAGIC!r}")
    version, layer, K, h, w, C = struct.unpack_from("<BBIIII", data, offset + 5)
    if version != _VERSION:
        raise ValueError(f"unsupported dictionary version {version}")
    head = 5 + struct.calcsize("<BBIIII")
    count = K * h * w * C
    atoms = np.frombuffer(data, dtype="<f8", count=count,
                          offset=offset + head).reshape(K, h, w, C)
    return ConvDictionary(atoms.copy(), layer=layer), head + count * 8
