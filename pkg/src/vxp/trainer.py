"""Three-stage training orchestration.

Stage "image"  trains the image branch with batch-hard triplets.
Stage "local"  freezes the image branch and trains the voxel backbone so
               projected voxel descriptors match image features pixel-wise.
Stage "global" keeps the image branch frozen, adds a fresh pooling/FC head
               to the voxel branch and regresses image descriptors directly.

Checkpoints are flat name->tensor dicts with prefixes "image." and "pc.";
stage prerequisites are enforced by checking for those groups. Every stage
is bitwise deterministic given (config, seed): all randomness flows from one
generator, data order is fixed, and parameters update in sorted-name order.
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import constants, heads, losses, sparse3d
from .autodiff import Tape, Tensor
from .dataio import TrainingSet, write_checkpoint
from .errors import (DegenerateDataset, NoCorrespondences, NoVisibleVoxels,
                     ShapeMismatch)
from .geometry import PointCloud, orthographic_project, project_voxels, voxelize
from .losses import TrainingBatch, TripletConfig

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class StageConfig:
    stage: str  # "image" | "local" | "global"
    epochs: int = 10
    base_lr: float = 1e-3
    lr_decay: float = 0.9  # per-epoch multiplier is lr_decay ** epoch
    batch_size: int = 32
    seed: int = 0
    beta: float = constants.SMOOTH_L1_BETA
    local_loss_mode: str = "depth_scaled"
    projection: str = "perspective"  # or "orthographic" (ablation)
    image_gain: float = 1.0
    augment_shift_px: int = 0  # stage 1 only: random +-px translations
    cloud_jitter_m: float = 0.0  # stage 3 only: random lateral cloud shifts
    conv_channels: tuple[int, ...] | None = None  # default: (feature_dim, feature_dim)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    descriptor_dim: int = 256
    feature_dim: int = 64
    vfe_dim: int = 32
    image_channels: tuple[int, int] = (32, 64)

    def __post_init__(self):
        if self.stage not in ("image", "local", "global"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.base_lr <= 0:
            raise ValueError("epochs >= 1 and base_lr > 0 required")
        if self.projection not in ("perspective", "orthographic"):
            raise ValueError(f"unknown projection {self.projection!r}")


def lr_schedule(epoch: int, base_lr: float,
                multiplier_fn: Callable[[int], float] | None = None,
                decay: float = 0.9) -> float:
    """base_lr times a per-epoch factor; default factor is decay**epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    factor = multiplier_fn(epoch) if multiplier_fn is not None else decay ** epoch
    return base_lr * factor


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.moments = {name: (np.zeros_like(t.values), np.zeros_like(t.values))
                        for name, t in params.items()}
        self.step_count = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Standard bias-corrected update, applied in sorted-name order.

    Parameters with no gradient this step are left untouched.
    """
    state.step_count += 1
    t = state.step_count
    correct1 = 1.0 - ADAM_BETA1 ** t
    correct2 = 1.0 - ADAM_BETA2 ** t
    for name in sorted(params):
        tensor = params[name]
        if tensor.grad is None:
            continue
        g = tensor.grad
        if g.shape != tensor.values.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs value {tensor.values.shape}")
        m, v = state.moments[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)
        tensor.values = tensor.values - lr * update


def params_digest(params: dict[str, Tensor], prefix: str = "") -> str:
    """SHA-256 over names and raw float64 bytes; used for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(params):
        if not name.startswith(prefix):
            continue
        h.update(name.encode())
        h.update(params[name].values.tobytes())
    return h.hexdigest()


def set_requires_grad(params: dict[str, Tensor], prefix: str, flag: bool) -> None:
    for name, tensor in params.items():
        if name.startswith(prefix):
            tensor.requires_grad = flag


def clear_grads(params: dict[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.grad = None


def sample_voxel_seed(sample_id: str, run_seed: int) -> int:
    """Stable per-sample seed for voxel overflow subsampling."""
    return (zlib.crc32(sample_id.encode("utf-8")) + run_seed) % (2 ** 31)


# --- parameter (de)construction around flat checkpoint dicts ---

def init_image_params(cfg: StageConfig, rng: np.random.Generator,
                      in_channels: int = 1) -> dict[str, Tensor]:
    channels = (*cfg.image_channels, cfg.feature_dim)
    encoder = heads.init_image_encoder_params(in_channels, rng, channels=channels,
                                              input_gain=cfg.image_gain)
    head = heads.init_gem_fcn_params(cfg.feature_dim, cfg.descriptor_dim, rng)
    params = dict(encoder.named("image.encoder"))
    params.update(head.named("image.head"))
    return params


def image_branch_from(params: dict[str, Tensor]
                      ) -> tuple[heads.ImageEncoderParams, heads.GemFcnParams]:
    blocks_w, blocks_b = [], []
    for i in range(16):
        key = f"image.encoder.block{i}.w"
        if key not in params:
            break
        blocks_w.append(params[key])
        blocks_b.append(params[f"image.encoder.block{i}.b"])
    if not blocks_w:
        raise DegenerateDataset("checkpoint lacks image encoder parameters")
    encoder = heads.ImageEncoderParams(
        block_w=blocks_w, block_b=blocks_b,
        input_gain=params.get("image.encoder.input_gain"))
    head = heads.GemFcnParams(p=params["image.head.p"],
                              fc_w=params["image.head.fc_w"],
                              fc_b=params["image.head.fc_b"])
    return encoder, head


def init_backbone_into(params: dict[str, Tensor], cfg: StageConfig,
                       rng: np.random.Generator) -> sparse3d.BackboneParams:
    backbone = sparse3d.init_backbone_params(rng, vfe_dim=cfg.vfe_dim,
                                             feature_dim=cfg.feature_dim,
                                             channels=cfg.conv_channels)
    params.update(backbone.named("pc.backbone"))
    for i, layer in enumerate(backbone.layers):
        params[f"pc.backbone.conv{i}.meta"] = Tensor(
            [float(layer.kernel_size), float(layer.stride)])
    return backbone


def backbone_from(params: dict[str, Tensor]) -> sparse3d.BackboneParams:
    vfe = sparse3d.VFEParams(w1=params["pc.backbone.vfe.w1"],
                             b1=params["pc.backbone.vfe.b1"],
                             w2_point=params.get("pc.backbone.vfe.w2_point"),
                             w2_context=params.get("pc.backbone.vfe.w2_context"),
                             b2=params.get("pc.backbone.vfe.b2"))
    layers = []
    for i in range(16):
        key = f"pc.backbone.conv{i}.kernel"
        if key not in params:
            break
        meta = params[f"pc.backbone.conv{i}.meta"].values
        layers.append(sparse3d.SparseConvLayer(
            kernel=params[key], bias=params[f"pc.backbone.conv{i}.bias"],
            kernel_size=int(meta[0]), stride=int(meta[1])))
    return sparse3d.BackboneParams(vfe=vfe, layers=layers)


def init_pc_head_into(params: dict[str, Tensor], cfg: StageConfig,
                      rng: np.random.Generator) -> heads.GemFcnParams:
    head = heads.init_gem_fcn_params(cfg.feature_dim, cfg.descriptor_dim, rng)
    params.update(head.named("pc.head"))
    return head


def pc_head_from(params: dict[str, Tensor]) -> heads.GemFcnParams:
    return heads.GemFcnParams(p=params["pc.head.p"], fc_w=params["pc.head.fc_w"],
                              fc_b=params["pc.head.fc_b"])


def require_groups(params: dict[str, Tensor], prefixes: list[str], stage: str) -> None:
    for prefix in prefixes:
        if not any(name.startswith(prefix) for name in params):
            raise DegenerateDataset(
                f"stage {stage!r} needs a checkpoint containing {prefix}* parameters")


@dataclass
class StageResult:
    params: dict[str, Tensor]
    history: list[tuple[int, int, float]]  # (epoch, step, loss)
    skipped_pairs: int = 0


def write_loss_history(path, history: list[tuple[int, int, float]]) -> None:
    lines = ["epoch,step,loss"] + [f"{e},{s},{l!r}" for e, s, l in history]
    Path(path).write_text("\n".join(lines) + "\n")


# --- stage 1: image triplet training ---

def _pair_batches(dataset: TrainingSet, batch_size: int,
                  rng: np.random.Generator) -> list[list[int]]:
    """Batches of sample indices built from (anchor, random positive) pairs.

    Guarantees a positive pair per anchor; invalid trailing batches (no
    negatives in reach) fold into their predecessor.
    """
    positions = np.asarray([s.position for s in dataset.samples])
    n = len(dataset.samples)
    dists = np.sqrt(((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2))
    pos_lists = []
    for a in range(n):
        cands = np.nonzero((dists[a] <= constants.POSITIVE_THRESHOLD_M)
                           & (np.arange(n) != a))[0]
        pos_lists.append(cands)
    anchors = [a for a in range(n) if len(pos_lists[a])]
    if not anchors:
        raise DegenerateDataset("no sample has a positive partner")

    order = rng.permutation(len(anchors))
    pairs = []
    for k in order:
        a = anchors[k]
        partner = int(pos_lists[a][rng.integers(0, len(pos_lists[a]))])
        pairs.append((a, partner))

    per_batch = max(1, batch_size // 2)
    batches = [pairs[i:i + per_batch] for i in range(0, len(pairs), per_batch)]

    def valid(batch_pairs):
        rows = [i for pair in batch_pairs for i in pair]
        sub = dists[np.ix_(rows, rows)]
        return bool(np.all((sub > constants.NEGATIVE_THRESHOLD_M).any(axis=1)))

    out: list[list[int]] = []
    for batch_pairs in batches:
        if valid(batch_pairs):
            out.append([i for pair in batch_pairs for i in pair])
        elif out:
            out[-1].extend(i for pair in batch_pairs for i in pair)
        else:
            raise DegenerateDataset("cannot form a batch with negatives in reach")
    return out


def _shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (no wrap-around)."""
    out = np.zeros_like(image)
    h, w = image.shape[:2]
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        image[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def train_stage_image(dataset: TrainingSet, cfg: StageConfig) -> StageResult:
    """Minimize the batch-hard triplet loss over image descriptors."""
    if cfg.stage != "image":
        raise ValueError("config stage must be 'image'")
    rng = np.random.default_rng(cfg.seed)
    in_channels = 1
    params = init_image_params(cfg, rng, in_channels)
    set_requires_grad(params, "image.", True)
    params["image.encoder.input_gain"].requires_grad = False
    encoder, head = image_branch_from(params)
    state = AdamState(params)

    images = np.stack([s.image[..., None] if s.image.ndim == 2 else s.image
                       for s in dataset.samples])
    positions = np.asarray([s.position for s in dataset.samples])

    history: list[tuple[int, int, float]] = []
    batch_size = cfg.batch_size
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.base_lr, decay=cfg.lr_decay)
        triggered = batch_size
        for batch_rows in _pair_batches(dataset, batch_size, rng):
            rows = np.asarray(batch_rows)
            batch_images = images[rows]
            if cfg.augment_shift_px > 0:
                span = cfg.augment_shift_px
                shifts = rng.integers(-span, span + 1, size=(len(rows), 2))
                batch_images = np.stack([
                    _shift_image(img, int(dy), int(dx))
                    for img, (dy, dx) in zip(batch_images, shifts)])
            clear_grads(params)
            with Tape() as tape:
                feats, ow, oh = heads.encode_image_batch(batch_images, encoder)
                seg = np.repeat(np.arange(len(rows)), oh * ow)
                pooled = heads.gem_pool_segments(feats, seg, len(rows), head.p)
                desc = ad.add_rowvec(ad.matmul(pooled, head.fc_w), head.fc_b)
                batch = TrainingBatch.from_positions(desc, positions[rows])
                result = losses.triplet_loss_batch_hard(batch, cfg.triplet)
                tape.backward(result.loss)
            adam_step(params, state, lr)
            history.append((epoch, step, float(result.loss.values)))
            step += 1
            new_size = losses.zero_triplet_expansion(result.zero_triplets,
                                                     len(rows), cfg.triplet)
            triggered = max(triggered, new_size)
        if triggered != batch_size:
            log.info("zero-triplet expansion: batch %d -> %d", batch_size, triggered)
            batch_size = triggered
    clear_grads(params)
    return StageResult(params=params, history=history)


# --- stage 2: local feature training ---

@dataclass
class _PreparedSample:
    cloud: object
    voxel_seed: int
    grid: object
    plans: sparse3d.BackbonePlans
    projected: object
    image_map: heads.ImageFeatureMap | None
    image_descriptor: np.ndarray | None


def _prepare_point_samples(dataset: TrainingSet, cfg: StageConfig,
                           backbone: sparse3d.BackboneParams,
                           encoder: heads.ImageEncoderParams,
                           image_head: heads.GemFcnParams,
                           need_projection: bool) -> tuple[list, list[int], int]:
    """Voxelize, plan convolutions and cache frozen image outputs per sample.

    Returns (prepared or None per sample, usable indices, skipped count).
    """
    prepared: list[_PreparedSample | None] = []
    skipped = 0
    for s in dataset.samples:
        voxel_seed = sample_voxel_seed(s.sample_id, cfg.seed)
        try:
            grid = voxelize(s.cloud, dataset.voxel_config, voxel_seed)
        except Exception:
            prepared.append(None)
            skipped += 1
            continue
        plans = sparse3d.plan_backbone(grid, backbone)

        image = s.image[..., None] if s.image.ndim == 2 else s.image
        fmap = heads.image_encode(image, encoder)
        fmap = heads.ImageFeatureMap(width=fmap.width, height=fmap.height,
                                     channels=fmap.channels,
                                     feats=Tensor(fmap.feats.values))
        desc = heads.fcn_project(heads.gem_pool(fmap.feats, image_head.p),
                                 image_head, "image", s.sample_id)

        projected = None
        if need_projection:
            final_coords = plans.plans[-1].out_coords if plans.plans else grid.coords
            eff = np.asarray(dataset.voxel_config.voxel_size, dtype=float)
            for layer in backbone.layers:
                eff = eff * layer.stride
            probe = sparse3d.SparseFeatureMap(
                coords=final_coords, feats=Tensor(np.zeros((final_coords.shape[0], 1))),
                grid_dims=plans.plans[-1].out_dims if plans.plans
                else dataset.voxel_config.grid_dims,
                effective_voxel_size=tuple(eff),
                range_min=dataset.voxel_config.range_min)
            try:
                if cfg.projection == "perspective":
                    projected = project_voxels(probe, dataset.projection,
                                               (fmap.width, fmap.height))
                else:
                    projected = orthographic_project(probe, (fmap.width, fmap.height))
            except NoVisibleVoxels:
                prepared.append(None)
                skipped += 1
                continue
        prepared.append(_PreparedSample(cloud=s.cloud, voxel_seed=voxel_seed,
                                        grid=grid, plans=plans, projected=projected,
                                        image_map=fmap,
                                        image_descriptor=desc.numpy().copy()))
    usable = [i for i, p in enumerate(prepared) if p is not None]
    return prepared, usable, skipped


def _clone_params(params: dict[str, Tensor], prefix: str = "") -> dict[str, Tensor]:
    """Fresh tensors so a stage never mutates the checkpoint it was given."""
    return {name: Tensor(t.values.copy()) for name, t in params.items()
            if name.startswith(prefix)}


def _point_branch_stage(dataset: TrainingSet, image_params: dict[str, Tensor],
                        cfg: StageConfig, with_head: bool,
                        resume_params: dict[str, Tensor] | None = None) -> StageResult:
    rng = np.random.default_rng(cfg.seed)
    require_groups(image_params, ["image."], cfg.stage)
    params = _clone_params(image_params, "image.")
    set_requires_grad(params, "image.", False)
    encoder, image_head = image_branch_from(params)

    if resume_params is not None and any(k.startswith("pc.backbone.") for k in resume_params):
        params.update(_clone_params(resume_params, "pc.backbone."))
        backbone = backbone_from(params)
    else:
        if cfg.stage == "global":
            raise DegenerateDataset(
                "stage 'global' needs the local-stage backbone checkpoint")
        backbone = init_backbone_into(params, cfg, rng)
    set_requires_grad(params, "pc.backbone.", True)
    for i in range(len(backbone.layers)):
        params[f"pc.backbone.conv{i}.meta"].requires_grad = False

    head = None
    if with_head:
        head = init_pc_head_into(params, cfg, rng)
        set_requires_grad(params, "pc.head.", True)

    trainable = {name: t for name, t in params.items() if t.requires_grad}
    state = AdamState(trainable)

    prepared, usable, skipped = _prepare_point_samples(
        dataset, cfg, backbone, encoder, image_head,
        need_projection=not with_head)
    if skipped > 0:
        log.info("stage %s: skipped %d unusable pairs", cfg.stage, skipped)
    if skipped > len(dataset.samples) / 2:
        raise DegenerateDataset(f"more than half the pairs unusable ({skipped})")
    if not usable:
        raise DegenerateDataset("no usable training pairs")

    history: list[tuple[int, int, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.base_lr, decay=cfg.lr_decay)
        order = rng.permutation(len(usable))
        for start in range(0, len(order), cfg.batch_size):
            rows = [usable[k] for k in order[start:start + cfg.batch_size]]
            jitters = None
            if with_head and cfg.cloud_jitter_m > 0:
                jitters = rng.normal(0.0, cfg.cloud_jitter_m, size=(len(rows), 2))
            clear_grads(params)
            with Tape() as tape:
                total = None
                for j, i in enumerate(rows):
                    prep = prepared[i]
                    if jitters is None:
                        grid, plans = prep.grid, prep.plans
                    else:
                        # translated copy of the cloud teaches pose robustness
                        shifted = prep.cloud.points.copy()
                        shifted[:, :2] += jitters[j]
                        grid = voxelize(PointCloud(shifted), dataset.voxel_config,
                                        prep.voxel_seed)
                        plans = sparse3d.plan_backbone(grid, backbone)
                    fmap = sparse3d.point_cloud_backbone(grid, backbone, plans)
                    if with_head:
                        pooled = heads.gem_pool(fmap.feats, head.p)
                        desc = heads.fcn_project(pooled, head, "point_cloud")
                        term = losses.global_descriptor_loss(
                            Tensor(prep.image_descriptor), desc.vector, cfg.beta)
                    else:
                        term = losses.local_descriptor_loss(
                            prep.projected, fmap.feats, prep.image_map,
                            cfg.local_loss_mode, cfg.beta)
                    total = term if total is None else ad.add(total, term)
                tape.backward(total)
            adam_step(trainable, state, lr)
            history.append((epoch, step, float(total.values)))
            step += 1
    clear_grads(params)
    return StageResult(params=params, history=history, skipped_pairs=skipped)


def train_stage_local(dataset: TrainingSet, image_params: dict[str, Tensor],
                      cfg: StageConfig) -> StageResult:
    """Train the voxel backbone against frozen image feature maps."""
    if cfg.stage != "local":
        raise ValueError("config stage must be 'local'")
    return _point_branch_stage(dataset, image_params, cfg, with_head=False)


def train_stage_global(dataset: TrainingSet, image_params: dict[str, Tensor],
                       local_params: dict[str, Tensor], cfg: StageConfig) -> StageResult:
    """Fine-tune the backbone and train a fresh head against frozen image
    descriptors."""
    if cfg.stage != "global":
        raise ValueError("config stage must be 'global'")
    require_groups(local_params, ["pc.backbone."], cfg.stage)
    return _point_branch_stage(dataset, image_params, cfg, with_head=True,
                               resume_params=local_params)


def save_stage(path, result: StageResult) -> None:
    write_checkpoint(path, result.params)
