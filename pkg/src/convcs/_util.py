"""Shared helpers: seeded sub-streams and array normalization."""

import numpy as np

# Named RNG sub-streams so each component (operator draw, dictionary init, ...)
# is independently reproducible from one root seed.
_STREAMS = {
    "operator": 0,
    "dict_init": 1,
    "selection": 2,
    "classifier": 3,
    "data": 4,
}


def substream_rng(seed, stream):
    """Return a Generator for a named sub-stream of the root seed."""
    if stream not in _STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[stream]]))


def as_image_stack(images):
    """Coerce images to a float64 (N, H, W, C) stack.

    Accepts a single (H, W) or (H, W, C) array, an (N, H, W) or
    (N, H, W, C) stack, or a sequence of equally shaped images.
    """
    if isinstance(images, np.ndarray):
        arr = np.asarray(images, dtype=np.float64)
    else:
        arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        # Ambiguous: (N, H, W) stack vs a single (H, W, C) image. A trailing
        # axis of length <= 4 on a 3d array is taken as channels only when the
        # leading axes look like one image; callers that batch images should
        # pass 4d arrays to be explicit.
        arr = arr[:, :, :, None]
    elif arr.ndim != 4:
        raise ValueError(f"images must have 2-4 dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite entries")
    return arr


def as_atom_stack(atoms):
    """Coerce dictionary atoms to a float64 (K, h, w, C) stack."""
    arr = np.asarray(atoms, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    elif arr.ndim != 4:
        raise ValueError(f"atoms must have shape (K, h, w) or (K, h, w, C), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("atoms contain non-finite entries")
    return arr
