"""Voxel feature encoding and sparse 3D convolution.

The encoder turns a VoxelGrid into per-voxel descriptors (per-point linear +
ReLU, max-pooled over the voxel's valid points, optionally a second layer on
the concatenation of point features with the voxel max). A stack of standard
(non-submanifold) sparse convolutions then coarsens the grid; with the
default two stride-2 layers the 110^3 input grid becomes 55^3 then 28^3.

Sparse convolution semantics match a dense convolution with zero padding
(k-1)//2 and output dims ceil(in/stride), restricted to output sites whose
receptive field touches at least one non-empty input. Coordinate planning is
separated from the numeric pass so per-sample plans can be reused across
training steps (active sites depend only on occupancy, never on weights).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ChannelMismatch, EmptyGrid, TooLarge
from .geometry import VoxelGrid

# sparse_to_dense refuses to allocate more than this many float64 values
DENSE_CELL_CAP = 64_000_000

# coordinate lookups use a flat table up to this many grid cells, a dict above
_LUT_CELL_CAP = 8_000_000


@dataclass
class SparseFeatureMap:
    """Sparse 3D feature map: unique integer coords with one descriptor each.

    effective_voxel_size is the input voxel size multiplied by the strides
    applied so far; together with range_min it places coarse voxel centers
    back into the sensor frame for projection.
    """

    coords: np.ndarray  # (T, 3) int64, unique, 0 <= c < grid_dims
    feats: Tensor       # (T, D)
    grid_dims: tuple[int, int, int]
    effective_voxel_size: tuple[float, float, float]
    range_min: tuple[float, float, float]

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.feats.shape[1]


@dataclass
class VFEParams:
    """Per-point encoder weights: 3 -> dim, optionally a second layer on
    [point_feat, voxel_max] -> dim."""

    w1: Tensor  # (3, dim)
    b1: Tensor  # (dim,)
    w2_point: Tensor | None = None    # (dim, dim)
    w2_context: Tensor | None = None  # (dim, dim)
    b2: Tensor | None = None          # (dim,)

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def has_second_layer(self) -> bool:
        return self.w2_point is not None

    def named(self, prefix: str = "vfe") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        if self.has_second_layer:
            yield f"{prefix}.w2_point", self.w2_point
            yield f"{prefix}.w2_context", self.w2_context
            yield f"{prefix}.b2", self.b2


def init_vfe_params(dim: int, rng: np.random.Generator,
                    second_layer: bool = False) -> VFEParams:
    def lin(n_in, n_out):
        scale = np.sqrt(2.0 / n_in)
        return Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True)

    params = VFEParams(w1=lin(3, dim), b1=Tensor(np.zeros(dim), requires_grad=True))
    if second_layer:
        params.w2_point = lin(dim, dim)
        params.w2_context = lin(dim, dim)
        params.b2 = Tensor(np.zeros(dim), requires_grad=True)
    return params


def vfe_encode(grid: VoxelGrid, params: VFEParams) -> SparseFeatureMap:
    """Encode each voxel's valid points into one descriptor.

    Padded rows never enter the computation, so padding is irrelevant to the
    output by construction.
    """
    t = grid.num_voxels
    if t == 0:
        raise EmptyGrid("voxel grid has no voxels")

    counts = grid.valid_counts
    seg_ids = np.repeat(np.arange(t), counts)
    row_idx = np.concatenate([
        np.arange(c) + v * grid.points.shape[1] for v, c in enumerate(counts)
    ])
    flat_points = Tensor(grid.points.reshape(-1, 3)[row_idx])

    h = ad.relu(ad.add_rowvec(ad.matmul(flat_points, params.w1), params.b1))
    pooled = ad.segment_max(h, seg_ids, t)

    if params.has_second_layer:
        context = ad.gather_rows(pooled, seg_ids)
        h2 = ad.relu(ad.add_rowvec(
            ad.add(ad.matmul(h, params.w2_point), ad.matmul(context, params.w2_context)),
            params.b2))
        pooled = ad.segment_max(h2, seg_ids, t)

    cfg = grid.config
    return SparseFeatureMap(
        coords=grid.coords.copy(),
        feats=pooled,
        grid_dims=cfg.grid_dims,
        effective_voxel_size=cfg.voxel_size,
        range_min=cfg.range_min,
    )


@dataclass
class SparseConvLayer:
    kernel: Tensor  # (k^3 * c_in, c_out), offset-major rows
    bias: Tensor    # (c_out,)
    kernel_size: int
    stride: int

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        k3 = self.kernel_size ** 3
        if self.kernel.shape[0] % k3 != 0:
            raise ValueError("kernel row count must be k^3 * c_in")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[0] // self.kernel_size ** 3

    @property
    def c_out(self) -> int:
        return self.kernel.shape[1]


def init_conv_layer(c_in: int, c_out: int, kernel_size: int, stride: int,
                    rng: np.random.Generator) -> SparseConvLayer:
    fan_in = kernel_size ** 3 * c_in
    kernel = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c_out)),
                    requires_grad=True)
    bias = Tensor(np.zeros(c_out), requires_grad=True)
    return SparseConvLayer(kernel=kernel, bias=bias,
                           kernel_size=kernel_size, stride=stride)


class _CoordLookup:
    """coord triple -> row index, flat table for small grids, dict otherwise."""

    def __init__(self, coords: np.ndarray, dims: np.ndarray):
        self.dims = dims
        flat = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
        if int(np.prod(dims)) <= _LUT_CELL_CAP:
            self.table = np.full(int(np.prod(dims)), -1, dtype=np.int64)
            self.table[flat] = np.arange(coords.shape[0])
            self.map = None
        else:
            self.table = None
            self.map = {int(f): i for i, f in enumerate(flat)}

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row indices for (n, 3) candidate coords; -1 where absent."""
        dims = self.dims
        inside = np.all(coords >= 0, axis=1) & np.all(coords < dims, axis=1)
        flat = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if self.table is not None:
            sel = np.nonzero(inside)[0]
            out[sel] = self.table[flat[sel]]
        else:
            for i in np.nonzero(inside)[0]:
                out[i] = self.map.get(int(flat[i]), -1)
        return out


@dataclass
class ConvPlan:
    """Reusable coordinate routing for one layer applied to one active set.

    patch_rows[o, d] holds the input row feeding output site o through
    kernel offset d, or num_inputs for "empty" (a zero pad row).
    """

    out_coords: np.ndarray
    out_dims: tuple[int, int, int]
    patch_rows: np.ndarray  # (T_out, k^3) int64
    num_inputs: int


def plan_sparse_conv(in_coords: np.ndarray, in_dims, kernel_size: int,
                     stride: int) -> ConvPlan:
    """Determine active output sites and their input rows per kernel offset.

    An output site o is active when any input site i = o*stride + d - pad is
    occupied for some kernel offset d; this is exactly the dense-conv
    receptive-field criterion.
    """
    in_dims = np.asarray(in_dims, dtype=np.int64)
    pad = (kernel_size - 1) // 2
    out_dims = tuple(int(-(-d // stride)) for d in in_dims)
    out_dims_arr = np.asarray(out_dims, dtype=np.int64)

    offsets = np.array(list(product(range(kernel_size), repeat=3)), dtype=np.int64)

    # candidate outputs from every (input, offset) pair with exact stride fit
    cand = in_coords[:, None, :] + pad - offsets[None, :, :]  # (T, k^3, 3)
    fits = np.all(cand % stride == 0, axis=2)
    cand = cand // stride
    fits &= np.all(cand >= 0, axis=2) & np.all(cand < out_dims_arr, axis=2)
    flat_out = (cand[:, :, 0] * out_dims_arr[1] + cand[:, :, 1]) * out_dims_arr[2] + cand[:, :, 2]
    active_flat = np.unique(flat_out[fits])

    oz = active_flat % out_dims_arr[2]
    oy = (active_flat // out_dims_arr[2]) % out_dims_arr[1]
    ox = active_flat // (out_dims_arr[1] * out_dims_arr[2])
    out_coords = np.stack([ox, oy, oz], axis=1).astype(np.int64)

    lookup = _CoordLookup(in_coords, in_dims)
    t_in = in_coords.shape[0]
    patch_rows = np.empty((out_coords.shape[0], offsets.shape[0]), dtype=np.int64)
    base = out_coords * stride - pad
    for d_flat, offset in enumerate(offsets):
        in_rows = lookup.lookup(base + offset)
        patch_rows[:, d_flat] = np.where(in_rows >= 0, in_rows, t_in)
    return ConvPlan(out_coords=out_coords, out_dims=out_dims,
                    patch_rows=patch_rows, num_inputs=t_in)


def apply_sparse_conv(feature_map: SparseFeatureMap, layer: SparseConvLayer,
                      plan: ConvPlan) -> SparseFeatureMap:
    """Numeric pass of a planned sparse convolution.

    Active-site patches are gathered into a (T_out, k^3 * c_in) matrix
    (empty cells hit the zero pad row) so the whole layer is one matmul.
    """
    c_in = feature_map.feature_dim
    if c_in != layer.c_in:
        raise ChannelMismatch(f"layer expects {layer.c_in} channels, map has {c_in}")
    t_out = plan.out_coords.shape[0]
    k3 = layer.kernel_size ** 3
    padded = ad.pad_zero_row(feature_map.feats)
    patches = ad.reshape(ad.gather_rows(padded, plan.patch_rows.ravel()),
                         (t_out, k3 * c_in))
    out_feats = ad.add_rowvec(ad.matmul(patches, layer.kernel), layer.bias)
    eff = tuple(float(s) * layer.stride for s in feature_map.effective_voxel_size)
    return SparseFeatureMap(
        coords=plan.out_coords,
        feats=out_feats,
        grid_dims=plan.out_dims,
        effective_voxel_size=eff,
        range_min=feature_map.range_min,
    )


def sparse_conv3d(feature_map: SparseFeatureMap, layer: SparseConvLayer) -> SparseFeatureMap:
    """Standard sparse 3D convolution over the active set (plans internally)."""
    if feature_map.feature_dim != layer.c_in:
        raise ChannelMismatch(
            f"layer expects {layer.c_in} channels, map has {feature_map.feature_dim}")
    plan = plan_sparse_conv(feature_map.coords, feature_map.grid_dims,
                            layer.kernel_size, layer.stride)
    return apply_sparse_conv(feature_map, layer, plan)


def sparse_to_dense(feature_map: SparseFeatureMap) -> np.ndarray:
    """Densify to a (X, Y, Z, D) array of feature values; zeros elsewhere."""
    dims = feature_map.grid_dims
    cells = int(np.prod(dims)) * feature_map.feature_dim
    if cells > DENSE_CELL_CAP:
        raise TooLarge(f"dense tensor would hold {cells} values")
    dense = np.zeros((*dims, feature_map.feature_dim))
    c = feature_map.coords
    dense[c[:, 0], c[:, 1], c[:, 2]] = feature_map.feats.values
    return dense


def dense_to_sparse(dense: np.ndarray, effective_voxel_size, range_min) -> SparseFeatureMap:
    """Inverse of sparse_to_dense; keeps cells with any nonzero feature."""
    occupied = np.any(dense != 0.0, axis=3)
    coords = np.stack(np.nonzero(occupied), axis=1).astype(np.int64)
    feats = dense[coords[:, 0], coords[:, 1], coords[:, 2]]
    return SparseFeatureMap(
        coords=coords, feats=Tensor(feats),
        grid_dims=dense.shape[:3],
        effective_voxel_size=tuple(effective_voxel_size),
        range_min=tuple(range_min),
    )


@dataclass
class BackboneParams:
    """VFE followed by a conv stack; ReLU after every convolution."""

    vfe: VFEParams
    layers: list[SparseConvLayer]

    def named(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        yield from self.vfe.named(f"{prefix}.vfe")
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.conv{i}.kernel", layer.kernel
            yield f"{prefix}.conv{i}.bias", layer.bias

    @property
    def output_dim(self) -> int:
        return self.layers[-1].c_out if self.layers else self.vfe.dim


def init_backbone_params(rng: np.random.Generator, vfe_dim: int = 32,
                         feature_dim: int = 64, second_vfe_layer: bool = False,
                         channels: tuple[int, ...] | None = None) -> BackboneParams:
    """Default stack: two kernel-3 stride-2 layers, so 110^3 -> 55^3 -> 28^3."""
    if channels is None:
        channels = (feature_dim, feature_dim)
    vfe = init_vfe_params(vfe_dim, rng, second_layer=second_vfe_layer)
    layers = []
    c_prev = vfe_dim
    for c_out in channels:
        layers.append(init_conv_layer(c_prev, c_out, kernel_size=3, stride=2, rng=rng))
        c_prev = c_out
    return BackboneParams(vfe=vfe, layers=layers)


@dataclass
class BackbonePlans:
    """Per-sample conv routing, reusable while the input occupancy is fixed."""

    plans: list[ConvPlan]


def plan_backbone(grid: VoxelGrid, params: BackboneParams) -> BackbonePlans:
    coords = grid.coords
    dims = np.asarray(grid.config.grid_dims, dtype=np.int64)
    plans = []
    for layer in params.layers:
        plan = plan_sparse_conv(coords, dims, layer.kernel_size, layer.stride)
        plans.append(plan)
        coords = plan.out_coords
        dims = np.asarray(plan.out_dims, dtype=np.int64)
    return BackbonePlans(plans=plans)


def point_cloud_backbone(grid: VoxelGrid, params: BackboneParams,
                         plans: BackbonePlans | None = None) -> SparseFeatureMap:
    """Full voxel branch: VFE then the sparse conv stack with ReLUs."""
    fmap = vfe_encode(grid, params.vfe)
    if plans is None:
        plans = plan_backbone(grid, params)
    for layer, plan in zip(params.layers, plans.plans):
        fmap = apply_sparse_conv(fmap, layer, plan)
        fmap.feats = ad.relu(fmap.feats)
    return fmap
