"""Two-layer model: block unpooling, stacked training, dictionary projection.

Layer-1 feature planes are partitioned into non-overlapping pooling blocks
holding at most one nonzero each. Pooling keeps the per-block winner value
(its offset recorded in an unpool map); unpooling scatters upper-layer
values back to the stored offsets, so no information is lost between
layers. Winner offsets are found by pretraining the lower layer without
the one-nonzero constraint and taking the per-block argmax of |value|.

For reconstruction, each layer-2 atom is projected to a data-layer filter:
its channel slices are unpooled with one deterministic offset per layer-1
atom (the offset that won most often during pretraining, applied
identically at every pooling block) and then synthesized through the
layer-1 filters. With these deterministic maps the projection is exact:
synthesizing with projected filters on zero-stuffed upsampled layer-2
features reproduces the unpool-then-synthesize pipeline bit for bit up to
rounding.

Model file: two CFAD1 dictionary records followed by a winner-statistics
record ("CFAW1", little-endian):

    magic b"CFAW1" | K1 u32 | blocks_y u32 | blocks_x u32 | p u32
    | K1*blocks_y*blocks_x*p*p winner counts as u32
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import conv_ops
from ._util import as_image_stack
from .dictionary_learning import (
    ConvDictionary,
    SolverConfig,
    _atoms_of,
    dictionary_from_bytes,
    dictionary_to_bytes,
    train_dictionary,
)
from .csrecon import reconstruct_insitu, reconstruct_prelearned

_MAGIC = b"CFAW1"


@dataclass
class LayerConfig:
    """Geometry of one model layer: atom count, kernel, pooling block."""

    n_atoms: int
    kernel: tuple            # (h, w)
    pool: tuple = (1, 1)     # (p_x, p_y) block over the layer's feature planes

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.pool = _pair(self.pool)
        if self.n_atoms < 1:
            raise ValueError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if min(self.kernel) < 1 or min(self.pool) < 1:
            raise ValueError("kernel and pool sizes must be >= 1")


@dataclass
class TwoLayerPlan:
    """Validated two-layer geometry for a given input image size."""

    image_shape: tuple       # (H, W)
    layer1: LayerConfig
    layer2: LayerConfig

    def __post_init__(self):
        H, W = self.image_shape[0], self.image_shape[1]
        h1, w1 = self.layer1.kernel
        px, py = self.layer1.pool
        fx, fy = H + h1 - 1, W + w1 - 1
        if fx % px or fy % py:
            raise ValueError(
                f"layer-1 feature size ({fx}, {fy}) is not an exact multiple "
                f"of the pooling block ({px}, {py})")
        self.blocks = (fx // px, fy // py)
        bh, bw = self.layer2.kernel
        if bh > self.blocks[0] or bw > self.blocks[1]:
            raise ValueError(
                f"layer-2 kernel {self.layer2.kernel} larger than pooled "
                f"grid {self.blocks}")


def _pair(value):
    if np.isscalar(value):
        return (int(value), int(value))
    a, b = value
    return (int(a), int(b))


def _block_view(features, pool):
    """(..., Hf, Wf) -> (..., bx, by, px*py) view over non-overlapping blocks."""
    px, py = pool
    *lead, fx, fy = features.shape
    if fx % px or fy % py:
        raise ValueError(
            f"feature size ({fx}, {fy}) not divisible by pool ({px}, {py})")
    bx, by = fx // px, fy // py
    view = features.reshape(*lead, bx, px, by, py)
    view = np.moveaxis(view, -3, -2)            # (..., bx, by, px, py)
    return view.reshape(*lead, bx, by, px * py)


def _from_block_view(blocks, pool):
    """Inverse of _block_view."""
    px, py = pool
    *lead, bx, by, _ = blocks.shape
    arr = blocks.reshape(*lead, bx, by, px, py)
    arr = np.moveaxis(arr, -2, -3)              # (..., bx, px, by, py)
    return arr.reshape(*lead, bx * px, by * py)


def pretrain_unpool_map(features, pool):
    """Per-block winner offsets: argmax of |value|, ties to the smallest offset.

    features: (..., Hf, Wf); returns int offsets shaped (..., bx, by) with
    values in [0, px*py).
    """
    blocks = _block_view(np.asarray(features, dtype=np.float64), pool)
    return np.argmax(np.abs(blocks), axis=-1)


def pool(features, unpool_map, pool_size):
    """Collapse each block to the value at its stored winner offset.

    features: (..., K, Hf, Wf), unpool_map: (..., K, bx, by); the result is
    channel-last, (..., bx, by, K), ready to be the next layer's input.
    """
    features = np.asarray(features, dtype=np.float64)
    blocks = _block_view(features, pool_size)
    gathered = np.take_along_axis(blocks, unpool_map[..., None], axis=-1)[..., 0]
    return np.moveaxis(gathered, -3, -1)


def unpool(x_upper, unpool_map, pool_size):
    """Scatter upper-layer values to the stored offsets (one per block).

    x_upper: (..., bx, by, K) channel-last; returns (..., K, bx*px, by*py)
    feature planes with at most one nonzero per block.
    """
    x_upper = np.asarray(x_upper, dtype=np.float64)
    vals = np.moveaxis(x_upper, -1, -3)         # (..., K, bx, by)
    if vals.shape != unpool_map.shape:
        raise ValueError(
            f"upper tensor blocks {vals.shape} do not match map {unpool_map.shape}")
    px, py = _pair(pool_size)
    blocks = np.zeros(vals.shape + (px * py,))
    np.put_along_axis(blocks, unpool_map[..., None], vals[..., None], axis=-1)
    return _from_block_view(blocks, (px, py))


@dataclass
class TwoLayerModel:
    """Trained two-layer dictionaries plus pretraining winner statistics."""

    layer1: ConvDictionary
    layer2: ConvDictionary
    winner_counts: np.ndarray   # (K1, bx, by, px*py) uint32
    pool_size: tuple            # (px, py)

    def deterministic_offsets(self):
        """Most frequent winner offset per layer-1 atom (ties: smallest).

        Counts are aggregated over all block positions so one offset is
        applied identically at every pooling region, which is what makes
        the dictionary projection exact.
        """
        totals = self.winner_counts.sum(axis=(1, 2))    # (K1, px*py)
        return np.argmax(totals, axis=1)


def accumulate_winner_counts(maps, n_offsets):
    """Histogram winner offsets over images: (N, K, bx, by) -> (K, bx, by, r)."""
    maps = np.asarray(maps)
    counts = np.zeros(maps.shape[1:] + (n_offsets,), dtype=np.uint32)
    for r in range(n_offsets):
        counts[..., r] = (maps == r).sum(axis=0)
    return counts


def train_two_layer(plan, config, images=None, measurements=None,
                    config2=None):
    """Stage-wise two-layer training.

    Stage 1 runs the single-layer solver on images (or measurements, in
    situ) without the one-nonzero constraint; stage 2 extracts per-block
    winner maps and statistics from the final layer-1 features; stage 3
    pools those features into the layer-2 input tensor and trains the
    layer-2 dictionary on it with the standard solver.

    Returns (model, info) where info holds the per-image unpool maps and
    both stage results.
    """
    if (images is None) == (measurements is None):
        raise ValueError("pass exactly one of images= or measurements=")
    k1 = plan.layer1
    if images is not None:
        X = as_image_stack(images)
        if X.shape[1:3] != tuple(plan.image_shape[:2]):
            raise ValueError(
                f"images {X.shape[1:3]} do not match plan {plan.image_shape}")
        stage1 = train_dictionary(X, k1.n_atoms, k1.kernel, config)
        d1, s1 = stage1.dictionary, stage1.features
    else:
        stage1 = reconstruct_insitu(measurements, k1.n_atoms, k1.kernel, config)
        d1, s1 = stage1.dictionary, stage1.features

    px, py = k1.pool
    maps = pretrain_unpool_map(s1, (px, py))            # (N, K1, bx, by)
    counts = accumulate_winner_counts(maps, px * py)
    x2 = pool(s1, maps, (px, py))                       # (N, bx, by, K1)

    k2 = plan.layer2
    stage2 = train_dictionary(x2, k2.n_atoms, k2.kernel, config2 or config)
    d2 = ConvDictionary(stage2.dictionary.atoms, layer=2)

    model = TwoLayerModel(layer1=d1, layer2=d2, winner_counts=counts,
                          pool_size=(px, py))
    info = {"stage1": stage1, "stage2": stage2, "maps": maps,
            "layer1_features": s1, "layer2_input": x2}
    return model, info


def _unpool_atom_plane(plane, pool_size, offset):
    """Place plane[v] at block v with the same in-block offset everywhere."""
    px, py = pool_size
    ox, oy = divmod(int(offset), py)
    out = np.zeros((plane.shape[0] * px, plane.shape[1] * py))
    out[ox::px, oy::py] = plane
    return out


def project_dictionary(model):
    """Project layer-2 atoms to data-layer filters through the unpool maps.

    Each channel slice of a layer-2 atom is unpooled with its atom's
    deterministic offset and fully convolved with the matching layer-1
    filter; the sum over layer-1 atoms is the projected filter. Filter
    size is (px*h2 + h1 - 1, py*w2 + w1 - 1).
    """
    if model.winner_counts is None:
        raise ValueError("model carries no winner statistics; train first")
    atoms1 = model.layer1.atoms                 # (K1, h1, w1, C)
    atoms2 = model.layer2.atoms                 # (K2, h2, w2, K1)
    K1, h1, w1, C = atoms1.shape
    K2, h2, w2, ch2 = atoms2.shape
    if ch2 != K1:
        raise ValueError(
            f"layer-2 atoms have {ch2} channels, expected K1={K1}")
    px, py = model.pool_size
    offsets = model.deterministic_offsets()
    out = np.zeros((K2, px * h2 + h1 - 1, py * w2 + w1 - 1, C))
    for k2 in range(K2):
        for k1 in range(K1):
            lifted = _unpool_atom_plane(atoms2[k2, :, :, k1], (px, py),
                                        offsets[k1])
            for c in range(C):
                out[k2, :, :, c] += conv_ops.conv2_full(lifted, atoms1[k1, :, :, c])
    return ConvDictionary(out, layer=1)


def upsample_layer2_features(s2, pool_size):
    """Zero-stuff layer-2 feature planes onto the projected-filter grid.

    s2: (..., K2, L2x, L2y); entry (wx, wy) lands at
    (wx*px + px - 1, wy*py + py - 1) on a canvas of ((L2x+1)*px - 1,
    (L2y+1)*py - 1). Valid convolution of the result with the projected
    filters equals unpooling the layer-2 synthesis with the deterministic
    maps and synthesizing through layer 1.
    """
    s2 = np.asarray(s2, dtype=np.float64)
    px, py = _pair(pool_size)
    *lead, lx, ly = s2.shape
    out = np.zeros((*lead, (lx + 1) * px - 1, (ly + 1) * py - 1))
    out[..., px - 1::px, py - 1::py] = s2
    return out


def two_stage_synthesis(model, s2):
    """Reference path: layer-2 synthesis, deterministic unpool, layer-1 synthesis."""
    atoms2 = model.layer2.atoms
    x2 = conv_ops.synthesize_atoms(atoms2, s2)          # (bx, by, K1)
    offsets = model.deterministic_offsets()
    bx, by, K1 = x2.shape
    const_map = np.broadcast_to(offsets[:, None, None], (K1, bx, by))
    s1 = unpool(x2, const_map, model.pool_size)         # (K1, fx, fy)
    return conv_ops.synthesize_atoms(model.layer1.atoms, s1)


def reconstruct_projected(measurements, projected, config=None):
    """Single-layer reconstruction with projected data-layer filters."""
    return reconstruct_prelearned(measurements, projected, config)


def save_two_layer(model, path):
    if model.pool_size[0] != model.pool_size[1]:
        raise ValueError("model file stores square pooling blocks only")
    K1, bx, by, _ = model.winner_counts.shape
    with open(path, "wb") as fh:
        fh.write(dictionary_to_bytes(model.layer1))
        fh.write(dictionary_to_bytes(model.layer2))
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", K1, by, bx, model.pool_size[0]))
        fh.write(model.winner_counts.astype("<u4").tobytes(order="C"))


def load_two_layer(path):
    with open(path, "rb") as fh:
        data = fh.read()
    d1, used1 = dictionary_from_bytes(data, 0)
    d2, used2 = dictionary_from_bytes(data, used1)
    offset = used1 + used2
    if data[offset:offset + 5] != _MAGIC:
        raise ValueError(f"bad statistics magic {data[offset:offset + 5]!r}")
    K1, by, bx, p = struct.unpack_from("<IIII", data, offset + 5)
    offset += 5 + struct.calcsize("<IIII")
    count = K1 * by * bx * p * p
    counts = np.frombuffer(data, dtype="<u4", count=count,
                           offset=offset).reshape(K1, bx, by, p * p)
    return TwoLayerModel(layer1=d1, layer2=d2, winner_counts=counts.copy(),
                         pool_size=(p, p))
