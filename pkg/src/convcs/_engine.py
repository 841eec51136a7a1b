"""Batched ADMM engine shared by the dictionary trainer and CS reconstructors.

The per-image feature subproblems for a fixed atom share one linear
operator, so they are solved as a single batched conjugate-gradient run
with per-image step sizes and convergence masks (mathematically identical
to independent per-image CG). Convolutions are evaluated through cached
kernel spectra at one FFT shape per geometry; the shape is at least the
feature size, which keeps every crop region free of circular wraparound.

The dual state U stored here is the unscaled multiplier: it advances by
eta * (S - Z), the shrinkage sees S + U/eta, and the feature solve sees
the scaled dual U/eta. (Feeding the unscaled dual into the feature solve
instead makes every zeroed coordinate's dual recursion a factor-(1 - eta)
loop, which blows up once eta passes 2.)
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import fft as _fft

from .sensing import unvectorize_batch, vectorize_batch


class TraceRow(NamedTuple):
    iter: int
    objective: float
    recon_err: float
    primal_residual: float
    eta: float


@dataclass
class EngineResult:
    atoms: np.ndarray          # (K, h, w, C)
    S: np.ndarray              # (N, K, Hf, Wf)
    Z: np.ndarray
    U: np.ndarray
    trace: list
    iterations: int
    converged: bool
    cg_failures: int = 0
    images: np.ndarray = None  # (N, H, W, C) final synthesis


class DivergenceError(RuntimeError):
    """Raised when the data-fidelity objective blows up; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class _DictOps:
    """Cached-spectrum convolution operators for one dictionary state."""

    def __init__(self, atoms, image_shape, workers=1):
        self.atoms = atoms
        K, h, w, C = atoms.shape
        H, W = image_shape
        self.K, self.h, self.w, self.C = K, h, w, C
        self.H, self.W = H, W
        self.Hf, self.Wf = H + h - 1, W + w - 1
        self.fshape = (_fft.next_fast_len(self.Hf), _fft.next_fast_len(self.Wf))
        self.workers = workers
        # (K, C, fh, fw2) spectra of atoms and their 180-degree rotations
        self._dhat = _fft.rfft2(atoms.transpose(0, 3, 1, 2), self.fshape,
                                workers=workers)
        self._dhat_rot = _fft.rfft2(atoms[:, ::-1, ::-1, :].transpose(0, 3, 1, 2),
                                    self.fshape, workers=workers)

    def _rfft(self, x):
        return _fft.rfft2(x, self.fshape, workers=self.workers)

    def _irfft(self, spec):
        return _fft.irfft2(spec, self.fshape, workers=self.workers)

    def apply_T_batch(self, k, S):
        """Valid conv of (N, Hf, Wf) features with atom k -> (N, H, W, C)."""
        shat = self._rfft(S)
        out = np.empty(S.shape[:-2] + (self.H, self.W, self.C))
        r0, c0 = self.h - 1, self.w - 1
        for c in range(self.C):
            full = self._irfft(shat * self._dhat[k, c])
            out[..., c] = full[..., r0:r0 + self.H, c0:c0 + self.W]
        return out

    def apply_T_adj_batch(self, k, X):
        """Full conv of (N, H, W, C) with rot180(atom k), summed over channels."""
        acc = None
        for c in range(self.C):
            term = self._rfft(X[..., c]) * self._dhat_rot[k, c]
            acc = term if acc is None else acc + term
        return self._irfft(acc)[..., :self.Hf, :self.Wf]

    def synthesize(self, S):
        """(N, K, Hf, Wf) -> (N, H, W, C) sum of per-atom valid convolutions."""
        shat = self._rfft(S)                       # (N, K, fh, fw2)
        out = np.empty(S.shape[:-3] + (self.H, self.W, self.C))
        r0, c0 = self.h - 1, self.w - 1
        for c in range(self.C):
            spec = np.einsum("nkab,kab->nab", shat, self._dhat[:, c], optimize=True)
            out[..., c] = self._irfft(spec)[..., r0:r0 + self.H, c0:c0 + self.W]
        return out

    def gradient(self, S, E):
        """Sum_n valid conv of rot180(S[n, k]) with E[n, :, :, c] -> (K, h, w, C)."""
        srot_hat = self._rfft(S[:, :, ::-1, ::-1])  # (N, K, fh, fw2)
        out = np.empty((self.K, self.h, self.w, self.C))
        r0, c0 = self.H - 1, self.W - 1
        for c in range(self.C):
            ehat = self._rfft(E[..., c])            # (N, fh, fw2)
            spec = np.einsum("nkab,nab->kab", srot_hat, ehat, optimize=True)
            out[..., c] = self._irfft(spec)[:, r0:r0 + self.h, c0:c0 + self.w]
        return out


def cg_batched(apply_op, B, X0, tol, max_iter):
    """Conjugate gradients on a batch of SPD systems sharing one operator.

    B, X0: (n, L). Each row runs an independent CG recursion; converged
    rows are frozen. Returns (X, converged, iterations, rel_residual).
    """
    B = B.reshape(B.shape[0], -1)
    X = X0.reshape(B.shape).copy()
    bnorm2 = np.einsum("nl,nl->n", B, B)
    zero_rhs = bnorm2 == 0.0
    X[zero_rhs] = 0.0
    R = B - apply_op(X)
    P = R.copy()
    rs = np.einsum("nl,nl->n", R, R)
    thresh = (tol ** 2) * bnorm2
    iterations = 0
    for it in range(max_iter):
        active = (rs > thresh) & ~zero_rhs
        if not active.any():
            break
        iterations = it + 1
        AP = apply_op(P)
        pap = np.einsum("nl,nl->n", P, AP)
        ok = active & (pap > 0)
        alpha = np.where(ok, rs / np.where(pap > 0, pap, 1.0), 0.0)
        X += alpha[:, None] * P
        R -= alpha[:, None] * AP
        rs_new = np.einsum("nl,nl->n", R, R)
        beta = np.where(ok, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        P = np.where(ok[:, None], R + beta[:, None] * P, P)
        rs = np.where(ok, rs_new, rs)
    converged = (rs <= thresh) | zero_rhs
    relres = np.sqrt(rs / np.where(bnorm2 > 0, bnorm2, 1.0))
    relres[zero_rhs] = 0.0
    return X, converged, iterations, relres


def run_admm(*, atoms, config, images=None, measurements=None, operator=None,
             image_shape=None, learn_dictionary=False, callback=None):
    """Run the four-step ADMM cycle (dictionary, features, shrinkage, dual).

    Exactly one of `images` (N, H, W, C) or `measurements` (N, M) must be
    given; measurements need `operator` and `image_shape`. Returns an
    EngineResult whose `images` field is the final synthesis.
    """
    cs_mode = measurements is not None
    if cs_mode == (images is not None):
        raise ValueError("pass exactly one of images= or measurements=")
    if cs_mode:
        Y = np.asarray(measurements, dtype=np.float64)
        if operator is None or image_shape is None:
            raise ValueError("measurements need operator= and image_shape=")
        H, W = image_shape[0], image_shape[1]
        C = image_shape[2] if len(image_shape) > 2 else 1
        if C != 1:
            raise ValueError("compressed solving supports single-channel images only")
        N = Y.shape[0]
        if Y.shape[1] != operator.M:
            raise ValueError(f"measurement length {Y.shape[1]} != operator M {operator.M}")
        if operator.N != H * W:
            raise ValueError(f"operator N {operator.N} != image pixels {H * W}")
    else:
        X = np.asarray(images, dtype=np.float64)
        N, H, W, C = X.shape

    K, h, w, Ca = atoms.shape
    if Ca != C:
        raise ValueError(f"dictionary has {Ca} channels, data has {C}")
    if h > H or w > W:
        raise ValueError(f"kernel ({h}, {w}) larger than image ({H}, {W})")
    Hf, Wf = H + h - 1, W + w - 1
    D = np.array(atoms, dtype=np.float64)

    cfg = config
    S = np.zeros((N, K, Hf, Wf))
    Z = np.zeros_like(S)
    U = np.zeros_like(S)
    dops = _DictOps(D, (H, W), workers=cfg.threads)

    if cs_mode and cfg.feature_init == "backprojection":
        back = unvectorize_batch(operator.apply_adj(Y), (H, W))[..., None]
        for k in range(K):
            S[:, k] = dops.apply_T_adj_batch(k, back)
        peak = np.max(np.abs(S), axis=(1, 2, 3))
        scale = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 0.0)
        S *= scale[:, None, None, None]

    n_feature = K * Hf * Wf
    target_nnz = int(np.clip(round(cfg.sparsity_target * n_feature), 0, n_feature))
    data_norm = np.linalg.norm(Y if cs_mode else X)

    trace = []
    cg_failures = 0
    converged = False
    iterations = 0
    initial_obj = None

    for t in range(cfg.max_outer):
        eta = min(cfg.eta_max, cfg.eta0 * cfg.eta_growth ** t)
        iterations = t + 1

        Xhat = dops.synthesize(S)
        if cs_mode:
            Rm = Y - operator.apply(vectorize_batch(Xhat[..., 0]))
        else:
            E = X - Xhat

        if learn_dictionary and cfg.beta != 0.0:
            Eimg = unvectorize_batch(operator.apply_adj(Rm), (H, W))[..., None] \
                if cs_mode else E
            G = dops.gradient(S, Eimg)
            if not np.all(np.isfinite(G)):
                raise DivergenceError(
                    f"non-finite dictionary gradient at iteration {t + 1}", trace)
            D = D + cfg.beta * G
            if cfg.renormalize_atoms:
                norms = np.sqrt(np.einsum("khwc,khwc->k", D, D))
                D /= np.where(norms > 0, norms, 1.0)[:, None, None, None]
            dops = _DictOps(D, (H, W), workers=cfg.threads)
            Xhat = dops.synthesize(S)
            if cs_mode:
                Rm = Y - operator.apply(vectorize_batch(Xhat[..., 0]))
            else:
                E = X - Xhat

        # feature solves, one atom at a time (the residual excluding the
        # current atom is refreshed after each solve)
        for k in range(K):
            tk_sk = dops.apply_T_batch(k, S[:, k])
            if cs_mode:
                y_excl = Rm + operator.apply(vectorize_batch(tk_sk[..., 0]))
                bp = unvectorize_batch(operator.apply_adj(y_excl), (H, W))[..., None]
                rhs_feat = dops.apply_T_adj_batch(k, bp)
            else:
                x_excl = E + tk_sk
                rhs_feat = dops.apply_T_adj_batch(k, x_excl)
            # U holds the unscaled multiplier; the linear system wants the
            # scaled dual U/eta, giving eta*z - U on the right-hand side
            rhs = rhs_feat + eta * Z[:, k] - U[:, k]

            def op_k(Sf, _k=k, _eta=eta):
                Sb = Sf.reshape(N, Hf, Wf)
                img = dops.apply_T_batch(_k, Sb)
                if cs_mode:
                    v = operator.apply(vectorize_batch(img[..., 0]))
                    img = unvectorize_batch(operator.apply_adj(v), (H, W))[..., None]
                feat = dops.apply_T_adj_batch(_k, img)
                return (feat + _eta * Sb).reshape(N, -1)

            sol, conv, _, _ = cg_batched(op_k, rhs.reshape(N, -1),
                                         S[:, k].reshape(N, -1),
                                         cfg.cg_tol, cfg.cg_max_iter)
            cg_failures += int((~conv).sum())
            S[:, k] = sol.reshape(N, Hf, Wf)
            tk_new = dops.apply_T_batch(k, S[:, k])
            if cs_mode:
                Rm = y_excl - operator.apply(vectorize_batch(tk_new[..., 0]))
            else:
                E = x_excl - tk_new

        # shrinkage with the per-image adaptive threshold (fixed nonzero count)
        V = (S + U / eta).reshape(N, -1)
        absv = np.abs(V)
        if target_nnz >= n_feature:
            gamma = np.zeros(N)
        else:
            gamma = np.partition(absv, n_feature - target_nnz - 1,
                                 axis=1)[:, n_feature - target_nnz - 1]
        Z = (np.sign(V) * np.maximum(absv - gamma[:, None], 0.0)).reshape(S.shape)

        U = U + eta * (S - Z)

        resid = Rm if cs_mode else E
        objective = 0.5 * float(np.sum(resid * resid))
        recon_err = float(np.linalg.norm(resid) / data_norm) if data_norm > 0 else 0.0
        primal = float(np.linalg.norm(S - Z))
        trace.append(TraceRow(t + 1, objective, recon_err, primal, eta))

        if callback is not None:
            callback({"iter": t + 1, "eta": eta, "objective": objective,
                      "recon_err": recon_err, "primal_residual": primal,
                      "S": S, "Z": Z, "U": U, "atoms": D})

        if initial_obj is None:
            initial_obj = objective
        # floor the reference by the all-zero-solution objective so a
        # near-perfect first fit does not turn later ADMM adjustment into
        # a false divergence; genuine blow-ups still exceed this fast
        elif objective > 1e6 * max(initial_obj, 0.5 * data_norm ** 2):
            raise DivergenceError(
                f"objective {objective:.3e} exceeds 1e6 x initial "
                f"{initial_obj:.3e} at iteration {t + 1}", trace)

        if recon_err < cfg.rel_tol:
            converged = True
            break

    return EngineResult(atoms=D, S=S, Z=Z, U=U, trace=trace,
                        iterations=iterations, converged=converged,
                        cg_failures=cg_failures)
