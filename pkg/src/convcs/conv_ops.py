"""Exact 2D convolution algebra for convolutional sparse models.

All routines implement *true* convolution (kernel flipped relative to
cross-correlation), matching the operator identities used by the solvers:

    apply_T(d, s)      = conv2_valid(s, d)                  image-sized
    apply_T_adj(d, x)  = conv2_full(x, rot180(d))           feature-sized
    apply_F(s, d)      = conv2_valid(s, d)                  image-sized
    apply_F_adj(s, x)  = conv2_valid(rot180(s), x)          kernel-sized

The adjoint identity <A u, v> == <u, A^T v> is the contract, not the flip
convention, and is enforced by the test suite.

A feature map paired with an (h, w) kernel has spatial size
(H + h - 1, W + w - 1) so that valid convolution returns the (H, W) image.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as _fft

# Direct convolution below these sizes, FFT above. The crossover favours
# direct summation for small kernels on small images where FFT setup
# overhead dominates.
_FFT_THRESHOLDS = {"kernel_area": 49, "image_area": 1024}


def set_fft_thresholds(kernel_area=None, image_area=None):
    """Adjust the automatic direct-vs-FFT crossover (module wide)."""
    if kernel_area is not None:
        _FFT_THRESHOLDS["kernel_area"] = int(kernel_area)
    if image_area is not None:
        _FFT_THRESHOLDS["image_area"] = int(image_area)


def rot180(kernel):
    """Rotate a 2D array by 180 degrees: out[p, q] = in[-1-p, -1-q]."""
    kernel = np.asarray(kernel)
    return kernel[::-1, ::-1]


def _check_2d(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {a.shape}")
    return a


def _direct_valid(a, b):
    # valid true convolution == cross-correlation with the flipped kernel
    windows = sliding_window_view(a, b.shape)
    return np.einsum("ijpq,pq->ij", windows, b[::-1, ::-1], optimize=True)


def _use_fft(a, b):
    return (b.size > _FFT_THRESHOLDS["kernel_area"]
            or a.size > _FFT_THRESHOLDS["image_area"])


def conv2_valid(feature, kernel, method="auto"):
    """True 2D convolution cropped to fully-overlapping positions.

    Output shape is (Ha - hb + 1, Wa - wb + 1); requires the first
    argument to be at least as large as the second along both axes.
    """
    feature = _check_2d("feature", feature)
    kernel = _check_2d("kernel", kernel)
    if feature.shape[0] < kernel.shape[0] or feature.shape[1] < kernel.shape[1]:
        raise ValueError(
            f"feature {feature.shape} smaller than kernel {kernel.shape} "
            "in valid convolution")
    if method == "fft" or (method == "auto" and _use_fft(feature, kernel)):
        return fft_conv2(feature, kernel, mode="valid")
    return _direct_valid(feature, kernel)


def conv2_full(image, kernel, method="auto"):
    """True 2D convolution with zero padding; output grows by kernel - 1."""
    image = _check_2d("image", image)
    kernel = _check_2d("kernel", kernel)
    if method == "fft" or (method == "auto" and _use_fft(image, kernel)):
        return fft_conv2(image, kernel, mode="full")
    ph, pw = kernel.shape[0] - 1, kernel.shape[1] - 1
    padded = np.pad(image, ((ph, ph), (pw, pw)))
    return _direct_valid(padded, kernel)


def fft_conv2(a, b, mode="full"):
    """FFT-path 2D true convolution, numerically equal to the direct path."""
    a = _check_2d("a", a)
    b = _check_2d("b", b)
    out_h = a.shape[0] + b.shape[0] - 1
    out_w = a.shape[1] + b.shape[1] - 1
    fshape = (_fft.next_fast_len(out_h), _fft.next_fast_len(out_w))
    spec = _fft.rfft2(a, fshape) * _fft.rfft2(b, fshape)
    full = _fft.irfft2(spec, fshape)[:out_h, :out_w]
    if mode == "full":
        return full
    if mode == "valid":
        if a.shape[0] < b.shape[0] or a.shape[1] < b.shape[1]:
            raise ValueError(
                f"first argument {a.shape} smaller than second {b.shape} "
                "in valid convolution")
        return full[b.shape[0] - 1:a.shape[0], b.shape[1] - 1:a.shape[1]].copy()
    raise ValueError(f"mode must be 'valid' or 'full', got {mode!r}")


def apply_T(dict_atom, feature, method="auto"):
    """Map a feature plane to image space: D_k * S_k (valid part)."""
    return conv2_valid(feature, dict_atom, method=method)


def apply_T_adj(dict_atom, residual_image, method="auto"):
    """Adjoint of apply_T: lift an image-sized residual to feature space."""
    return conv2_full(residual_image, rot180(dict_atom), method=method)


def apply_F(feature, atom, method="auto"):
    """Image synthesized from one atom through a fixed feature plane."""
    return conv2_valid(feature, atom, method=method)


def apply_F_adj(feature, residual_image, method="auto"):
    """Adjoint of apply_F: kernel-sized gradient of the data term."""
    return conv2_valid(rot180(np.asarray(feature, dtype=np.float64)),
                       residual_image, method=method)


def synthesize_atoms(atoms, maps, method="auto"):
    """Sum of per-atom valid convolutions.

    atoms: (K, h, w) or (K, h, w, C); maps: (K, H+h-1, W+w-1).
    Returns (H, W) for 3D atoms, (H, W, C) for 4D atoms.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    squeeze = atoms.ndim == 3
    if squeeze:
        atoms = atoms[..., None]
    K, h, w, C = atoms.shape
    if maps.shape[0] != K:
        raise ValueError(f"got {maps.shape[0]} maps for {K} atoms")
    H = maps.shape[1] - h + 1
    W = maps.shape[2] - w + 1
    if H < 1 or W < 1:
        raise ValueError(f"maps {maps.shape[1:]} too small for atoms ({h}, {w})")
    out = np.zeros((H, W, C))
    for k in range(K):
        for c in range(C):
            out[:, :, c] += conv2_valid(maps[k], atoms[k, :, :, c], method=method)
    return out[:, :, 0] if squeeze else out
