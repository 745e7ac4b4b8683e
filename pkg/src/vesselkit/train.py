"""Training: loss functions, exact gradients, AdamW, cosine warm restarts,
patch sampling, and the epoch loop.

Training is patch-based so it stays feasible on a CPU: each epoch every
volume contributes its z-normalized original plus one augmented copy
(gamma jitter, then elastic deformation, then z-normalization), patches are
sampled from both, shuffled, and each patch drives one optimizer step.
Everything is deterministic under the configured seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentParams, elastic_deform, random_gamma
from .errors import NumericError, ParameterError, ShapeError
from .model import HessNetConfig, ParamStore, _forward_arr, backward_from_cache, init_params
from .volume import BinaryMask, Volume, z_normalize

_LOG_EPS = 1e-7          # probability clamp before logarithms
_NEGLOG_FLOOR = 1e-16    # keeps d(-ln TI)^g / dTI finite as TI -> 1


@dataclass(frozen=True)
class LossParams:
    """Weights of the exponential-logarithmic overlap + cross-entropy loss."""

    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    gamma_tversky: float = 0.3
    gamma_ce: float = 0.3
    w_tversky: float = 0.5
    w_ce: float = 0.5
    smooth: float = 1.0

    def __post_init__(self):
        vals = (self.tversky_alpha, self.tversky_beta, self.gamma_tversky,
                self.gamma_ce, self.w_tversky, self.w_ce, self.smooth)
        if any(v <= 0 for v in vals):
            raise ParameterError("all loss parameters must be > 0")
        if abs(self.w_tversky + self.w_ce - 1.0) > 1e-12:
            raise ParameterError("w_tversky + w_ce must equal 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr_max: float = 0.02
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t0: int = 10
    t_mult: int = 2
    patch_size: int = 32
    patches_per_volume: int = 16
    foreground_patch_fraction: float = 0.5
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError("betas must lie in (0, 1)")
        if self.lr_min > self.lr_max:
            raise ParameterError("lr_min must be <= lr_max")
        if self.t0 <= 0 or self.t_mult < 1:
            raise ParameterError("need t0 > 0 and t_mult >= 1")
        if self.patch_size < 1 or self.patches_per_volume < 1:
            raise ParameterError("patch_size and patches_per_volume must be >= 1")
        if not 0.0 <= self.foreground_patch_fraction <= 1.0:
            raise ParameterError("foreground_patch_fraction must be in [0, 1]")


@dataclass
class OptState:
    """AdamW first/second moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


# ---------------------------------------------------------------------------
# Losses

def tversky_index(probs: Volume, target: BinaryMask, alpha: float, beta: float, smooth: float) -> float:
    """Soft Tversky overlap index; alpha weights FP, beta weights FN."""
    if probs.dims != target.dims:
        raise ShapeError(f"probs dims {probs.dims} != target dims {target.dims}")
    return _tversky_arr(probs.data.astype(np.float64), target.data.astype(np.float64), alpha, beta, smooth)


def _tversky_arr(p, g, alpha, beta, smooth) -> float:
    inter = float(p @ g)
    fp = float(p.sum() - inter)
    fn = float(g.sum() - inter)
    return (inter + smooth) / (inter + alpha * fp + beta * fn + smooth)


def exp_log_tversky_loss(probs: Volume, target: BinaryMask, lp: LossParams = LossParams()) -> float:
    """w_t*(-ln TI)^g_t + w_ce*mean[(-ln p_correct)^g_ce].

    p_correct is p on foreground voxels and 1-p on background. Probabilities
    are clamped to [1e-7, 1 - 1e-7] before any logarithm.
    """
    if probs.dims != target.dims:
        raise ShapeError(f"probs dims {probs.dims} != target dims {target.dims}")
    loss, _ = _loss_terms(probs.data.astype(np.float64), target.data.astype(np.float64), lp, want_grad=False)
    return loss


def _loss_terms(p, g, lp: LossParams, want_grad: bool):
    """Loss value and (optionally) dLoss/dp on flat float64 arrays."""
    clamped = (p < _LOG_EPS) | (p > 1.0 - _LOG_EPS)
    pc = np.clip(p, _LOG_EPS, 1.0 - _LOG_EPS)

    inter = float(pc @ g)
    fp_sum = float(pc.sum() - inter)
    fn_sum = float(g.sum() - inter)
    denom = inter + lp.tversky_alpha * fp_sum + lp.tversky_beta * fn_sum + lp.smooth
    ti = (inter + lp.smooth) / denom
    neg_log_ti = max(-math.log(ti), _NEGLOG_FLOOR)

    p_correct = np.where(g > 0, pc, 1.0 - pc)
    neg_log_pc = -np.log(p_correct)
    n = p.size
    loss = lp.w_tversky * neg_log_ti**lp.gamma_tversky + lp.w_ce * float(
        (neg_log_pc**lp.gamma_ce).mean()
    )
    if not want_grad:
        return loss, None

    # d/dTI of (-ln TI)^g = -g*(-ln TI)^(g-1)/TI, then dTI/dp per voxel.
    dloss_dti = -lp.w_tversky * lp.gamma_tversky * neg_log_ti ** (lp.gamma_tversky - 1.0) / ti
    dti_dp = (g * denom - (g + lp.tversky_alpha * (1.0 - g) - lp.tversky_beta * g) * (inter + lp.smooth)) / (
        denom * denom
    )
    sign = np.where(g > 0, 1.0, -1.0)
    dce_dp = (
        -lp.w_ce * lp.gamma_ce / n
        * np.maximum(neg_log_pc, _NEGLOG_FLOOR) ** (lp.gamma_ce - 1.0)
        / p_correct
        * sign
    )
    grad = dloss_dti * dti_dp + dce_dp
    grad[clamped] = 0.0
    return loss, grad


# ---------------------------------------------------------------------------
# Gradients, optimizer, schedule

def backward(
    params: ParamStore,
    config: HessNetConfig,
    patch: Volume,
    target: BinaryMask,
    lp: LossParams = LossParams(),
) -> np.ndarray:
    """Gradient of the loss with respect to every parameter entry."""
    _, grad = loss_and_grad(params, config, patch.as3d(), target.data, lp)
    return grad


def loss_and_grad(params, config, patch_arr, target_flat, lp) -> tuple[float, np.ndarray]:
    probs, cache = _forward_arr(params, config, patch_arr, keep_cache=True)
    g = np.asarray(target_flat, dtype=np.float64).ravel()
    loss, g_probs = _loss_terms(probs, g, lp, want_grad=True)
    grad = backward_from_cache(params, config, cache, g_probs)
    return loss, grad


def adamw_step(
    params: ParamStore,
    grads: np.ndarray,
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update (mutates params and state)."""
    grads = np.asarray(grads, dtype=np.float64).ravel()
    if grads.size != params.values.size:
        raise ShapeError("gradient length != parameter length")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    if weight_decay:
        params.values *= 1.0 - lr * weight_decay     # decay decoupled from the moment update
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    params.values -= lr * m_hat / (np.sqrt(v_hat) + eps * math.sqrt(bc2))


def cosine_warm_restarts_lr(t: float, t0: float, t_mult: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing with warm restarts, evaluated at epoch progress t.

    Cycle i has length t0 * t_mult**i; the rate restarts to lr_max at each
    cycle boundary.
    """
    if t0 <= 0 or t_mult < 1 or t < 0:
        raise ParameterError("need t0 > 0, t_mult >= 1, t >= 0")
    t_cur, t_i = float(t), float(t0)
    if t_mult == 1:
        t_cur = t % t0
    else:
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= t_mult
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i)) / 2.0


# ---------------------------------------------------------------------------
# Patch sampling

@dataclass
class PatchPair:
    corner: tuple[int, int, int]
    image: Volume
    label: BinaryMask


@dataclass
class PatchSet:
    pairs: list[PatchPair]
    fallback_uniform: bool = False   # set when fg sampling found an empty mask


def sample_patches(volume: Volume, mask: BinaryMask, cfg: TrainConfig, rng: np.random.Generator) -> PatchSet:
    """Sample cubic training patches, at least `foreground_patch_fraction` of
    them centered on a mask-positive voxel."""
    if volume.dims != mask.dims:
        raise ShapeError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    ps = cfg.patch_size
    dims = volume.dims
    if any(ps > d for d in dims):
        raise ShapeError(f"patch size {ps} does not fit in dims {dims}")
    if all(ps == d for d in dims):
        return PatchSet([PatchPair((0, 0, 0), volume.copy(), mask.copy())])

    vol3, msk3 = volume.as3d(), mask.as3d()
    n = cfg.patches_per_volume
    n_fg = math.ceil(cfg.foreground_patch_fraction * n)
    positives = np.flatnonzero(mask.data)
    fallback = False
    if positives.size == 0 and n_fg > 0:
        fallback = True
        n_fg = 0

    nx, ny = dims[0], dims[1]
    corners: list[tuple[int, int, int]] = []
    for _ in range(n_fg):
        flat = int(positives[rng.integers(positives.size)])
        center = (flat % nx, (flat // nx) % ny, flat // (nx * ny))
        corners.append(tuple(
            int(np.clip(c - ps // 2, 0, d - ps)) for c, d in zip(center, dims)
        ))
    for _ in range(n - n_fg):
        corners.append(tuple(int(rng.integers(0, d - ps + 1)) for d in dims))

    pairs = []
    for corner in corners:
        sl = tuple(slice(c, c + ps) for c in corner)
        pairs.append(
            PatchPair(
                corner,
                Volume.from3d(vol3[sl], spacing=volume.spacing),
                BinaryMask.from3d(msk3[sl]),
            )
        )
    return PatchSet(pairs, fallback_uniform=fallback)


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    val_dsc: float | None = None

    def to_dict(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "mean_loss": self.mean_loss}
        if self.val_dsc is not None:
            out["val_dsc"] = self.val_dsc
        return out


class TrainingDiverged(NumericError):
    """Loss became non-finite; carries the last finished-epoch parameters."""

    def __init__(self, message: str, params: ParamStore, history: list[EpochRecord]):
        super().__init__(message)
        self.params = params
        self.history = history


def _stage_rng(seed: int, *path: int) -> np.random.Generator:
    # Documented seed fan-out: every random stage draws from
    # default_rng([seed, *stage path]).
    return np.random.default_rng([seed, *path])


def train(
    pairs: list[tuple[Volume, BinaryMask]],
    config: HessNetConfig = HessNetConfig(),
    tc: TrainConfig = TrainConfig(),
    lp: LossParams = LossParams(),
    val_pair: tuple[Volume, BinaryMask] | None = None,
    augment: AugmentParams = AugmentParams(),
) -> tuple[ParamStore, list[EpochRecord]]:
    """Train on (volume, mask) pairs; returns final parameters and history.

    Per epoch each volume contributes two instances: the z-normalized
    original and one augmented copy. Patches from all instances are pooled,
    shuffled, and each patch is one AdamW step with the scheduled rate.
    """
    if not pairs:
        raise ParameterError("need at least one (volume, mask) training pair")
    for vol, msk in pairs:
        if vol.dims != msk.dims:
            raise ShapeError(f"volume dims {vol.dims} != mask dims {msk.dims}")

    params = init_params(config, seed=tc.seed)
    state = OptState.zeros(params.values.size)
    originals = [(z_normalize(vol), msk) for vol, msk in pairs]
    val_norm = None
    if val_pair is not None:
        val_norm = (z_normalize(val_pair[0]), val_pair[1])

    history: list[EpochRecord] = []
    last_good = params.copy()
    for epoch in range(tc.epochs):
        instances = list(originals)
        for vi, (vol, msk) in enumerate(pairs):
            jittered = random_gamma(
                vol, augment.log_gamma_range, rng_seed=_stage_rng(tc.seed, epoch, vi, 0).integers(2**31)
            )
            warped, warped_mask = elastic_deform(
                jittered,
                msk,
                control_grid=augment.control_grid,
                max_displacement_voxels=augment.max_displacement,
                rng_seed=_stage_rng(tc.seed, epoch, vi, 1).integers(2**31),
            )
            instances.append((z_normalize(warped), warped_mask))

        pool: list[tuple[np.ndarray, np.ndarray]] = []
        for ii, (vol, msk) in enumerate(instances):
            patch_rng = _stage_rng(tc.seed, epoch, ii, 2)
            for pp in sample_patches(vol, msk, tc, patch_rng).pairs:
                pool.append((pp.image.as3d().astype(np.float64), pp.label.data))

        order = _stage_rng(tc.seed, epoch, 3).permutation(len(pool))
        epoch_lr = cosine_warm_restarts_lr(float(epoch), tc.t0, tc.t_mult, tc.lr_max, tc.lr_min)
        losses = []
        for si, pi in enumerate(order):
            arr, target = pool[pi]
            t = epoch + si / len(order)
            lr = cosine_warm_restarts_lr(t, tc.t0, tc.t_mult, tc.lr_max, tc.lr_min)
            loss, grad = loss_and_grad(params, config, arr, target, lp)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, step {si}", last_good, history
                )
            adamw_step(params, grad, state, lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
            losses.append(loss)

        val_dsc = None
        if val_norm is not None:
            val_dsc = _dice_at_threshold(params, config, val_norm[0], val_norm[1], tc.threshold)
        history.append(EpochRecord(epoch, epoch_lr, float(np.mean(losses)), val_dsc))
        last_good = params.copy()
    return params, history


def _dice_at_threshold(params, config, vol_norm: Volume, mask: BinaryMask, threshold: float) -> float:
    probs, _ = _forward_arr(params, config, vol_norm.as3d(), keep_cache=False)
    pred = probs.reshape(-1) > threshold
    gt = mask.as3d().ravel() > 0
    tp = float(np.count_nonzero(pred & gt))
    denom = 2 * tp + float(np.count_nonzero(pred & ~gt)) + float(np.count_nonzero(~pred & gt))
    return 2 * tp / denom if denom else 1.0
