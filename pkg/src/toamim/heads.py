"""Task heads and the two training loops (MIM pre-training, curtain fine-tuning)."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics as M
from .encoder import (EncoderConfig, OptimizerState, SwinEncoder, adamw_step, clamp_temperatures,
                      count_parameters, init_weights, onecycle_lr)
from .errors import ParameterError, TrainingAbortError
from .mim import MaskSpec, gen_mask, masked_l1_loss

logger = logging.getLogger(__name__)


def _dtype(precision: int) -> torch.dtype:
    if precision not in (32, 64):
        raise ParameterError(f"precision must be 32 or 64, got {precision}")
    return torch.float64 if precision == 64 else torch.float32


# --- models -----------------------------------------------------------------------

class ReconHead(nn.Module):
    """1x1 projection to stride^2 * bands values per token, pixel-shuffled back to chip size."""

    def __init__(self, in_dim: int, stride: int, bands: int = 14):
        super().__init__()
        self.proj = nn.Conv2d(in_dim, stride * stride * bands, kernel_size=1)
        self.shuffle = nn.PixelShuffle(stride)

    def forward(self, tokens):
        return self.shuffle(self.proj(tokens.permute(0, 3, 1, 2)))


class MimModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = SwinEncoder(config)
        self.head = ReconHead(config.out_dim, config.out_stride, config.in_bands)

    def forward(self, x, pixel_mask=None):
        final, _ = self.encoder(x, pixel_mask)
        return self.head(final)


def build_mim_model(config: EncoderConfig, seed: int = 0) -> MimModel:
    model = MimModel(config)
    init_weights(model, seed)
    # start the pixel predictions near zero instead of at unit scale
    with torch.no_grad():
        model.head.proj.weight.mul_(0.02)
    return model


class UpBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(width, width, kernel_size=3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.gelu(self.conv(x))


class CurtainDecoder(nn.Module):
    """Shared curtain decoder: upsample to chip resolution, classify height bins, read the centre column."""

    def __init__(self, width: int, n_up: int, height_bins: int):
        super().__init__()
        self.ups = nn.Sequential(*[UpBlock(width) for _ in range(n_up)])
        self.classify = nn.Conv2d(width, height_bins, kernel_size=1)

    def forward(self, x):
        logits = self.classify(self.ups(x))  # N, bins, H, W
        centre = logits[..., logits.shape[-1] // 2]  # N, bins, H
        return centre.transpose(1, 2)  # N, H, bins


class FcnEncoder(nn.Module):
    """Four stride-2 conv blocks; the from-scratch baseline backbone."""

    def __init__(self, in_bands: int = 14, channels: Sequence[int] = (16, 24, 32, 28)):
        super().__init__()
        layers = []
        c_in = in_bands
        for c in channels:
            layers.append(nn.Conv2d(c_in, c, kernel_size=3, stride=2, padding=1))
            c_in = c
        self.blocks = nn.ModuleList(layers)
        self.out_channels = c_in
        self.stride = 2 ** len(channels)

    def features(self, x):
        for conv in self.blocks:
            x = F.gelu(conv(x))
        return x


class CurtainModel(nn.Module):
    """Backbone + 1x1 adapter + shared decoder; ``backbone`` is ``swin`` or ``fcn``."""

    def __init__(self, backbone: str, chip_size: int, height_bins: int,
                 encoder_config: EncoderConfig | None = None, decoder_width: int = 32,
                 fcn_channels: Sequence[int] = (16, 24, 32, 28)):
        super().__init__()
        self.backbone = backbone
        if backbone == "swin":
            if encoder_config is None:
                raise ParameterError("swin backbone needs an encoder config")
            self.encoder = SwinEncoder(encoder_config)
            in_ch, stride = encoder_config.out_dim, encoder_config.out_stride
        elif backbone == "fcn":
            self.encoder = FcnEncoder(14, fcn_channels)
            in_ch, stride = self.encoder.out_channels, self.encoder.stride
        else:
            raise ParameterError(f"unknown backbone {backbone!r}")
        n_up = int(round(math.log2(stride)))
        if 2**n_up != stride or chip_size % stride:
            raise ParameterError(f"backbone stride {stride} incompatible with chip {chip_size}")
        self.adapter = nn.Conv2d(in_ch, decoder_width, kernel_size=1)
        self.decoder = CurtainDecoder(decoder_width, n_up, height_bins)

    def features(self, x):
        if self.backbone == "swin":
            final, _ = self.encoder(x)
            return final.permute(0, 3, 1, 2)
        return self.encoder.features(x)

    def forward(self, x):
        return self.decoder(F.gelu(self.adapter(self.features(x))))

    def head_parameter_count(self) -> int:
        return count_parameters(self.adapter) + count_parameters(self.decoder)


# --- state container ------------------------------------------------------------------

@dataclass
class EncoderState:
    """Model parameters, AdamW moments and the step counter."""

    model: nn.Module
    config: EncoderConfig
    opt: OptimizerState = field(default_factory=OptimizerState)
    kind: str = "mim"

    @property
    def step(self) -> int:
        return self.opt.step


def named_params(model: nn.Module, trainable_only: bool = True) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad or not trainable_only}


# --- pre-training ------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 32
    mask_ratio: float = 0.6
    lr_max: float = 2e-3
    lr_start: float = 8e-5
    lr_final: float = 1e-6
    warm_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.05
    precision: int = 32
    seed: int = 0


@dataclass
class PretrainResult:
    state: EncoderState
    train_loss: list[float]  # mean masked L1 per epoch (epochs 1..E)
    eval_loss: list[float]  # held-out masked L1 at epochs 0..E (0 = before training)


def mask_batch(n: int, grid: int, ratio: float, patch: int, rng: np.random.Generator) -> np.ndarray:
    """(n, H, W) boolean pixel masks, one independent draw per sample."""
    return np.stack([gen_mask(grid, grid, ratio, rng, patch).pixel_mask() for _ in range(n)])


def fixed_eval_masks(n: int, config: EncoderConfig, ratio: float, seed: int) -> np.ndarray:
    g = config.chip_size // config.patch
    return mask_batch(n, g, ratio, config.patch, np.random.default_rng(seed))


@torch.no_grad()
def masked_l1_eval(model: MimModel, chips: np.ndarray, masks: np.ndarray, precision: int = 32,
                   batch_size: int = 64) -> float:
    """Held-out masked L1 averaged over every masked pixel and band of the set."""
    model.eval()
    dt = _dtype(precision)
    total, count = 0.0, 0.0
    for i in range(0, len(chips), batch_size):
        x = torch.as_tensor(chips[i:i + batch_size], dtype=dt)
        m = torch.as_tensor(masks[i:i + batch_size])
        pred = model(x, m)
        mf = m.to(dt).unsqueeze(1).expand_as(x)
        total += float(((pred - x).abs() * mf).sum())
        count += float(mf.sum())
    return total / count


def pretrain(chips: np.ndarray, config: EncoderConfig = EncoderConfig(),
             pcfg: PretrainConfig = PretrainConfig(), eval_chips: np.ndarray | None = None,
             state: EncoderState | None = None, abort_checkpoint=None) -> PretrainResult:
    """Masked-image-modelling pre-training.

    ``chips`` is (N, 14, H, W) in [0, 1].  Every step draws a fresh mask per
    sample, predicts the chip, takes the masked L1, and applies AdamW under
    the OneCycle schedule.  Fully determined by ``pcfg.seed``.
    """
    if len(chips) == 0:
        raise ParameterError("pre-training needs at least one chip")
    if chips.shape[1:] != (config.in_bands, config.chip_size, config.chip_size):
        raise ParameterError(f"chips {chips.shape[1:]} do not match the encoder config")
    dt = _dtype(pcfg.precision)
    if state is None:
        state = EncoderState(build_mim_model(config, pcfg.seed).to(dt), config)
    model = state.model
    grid = config.chip_size // config.patch
    n = len(chips)
    steps_per_epoch = math.ceil(n / pcfg.batch_size)
    total_steps = steps_per_epoch * pcfg.epochs
    data = torch.as_tensor(chips, dtype=dt)

    eval_masks = None
    eval_loss: list[float] = []
    if eval_chips is not None:
        eval_masks = fixed_eval_masks(len(eval_chips), config, pcfg.mask_ratio, pcfg.seed + 1)
        eval_loss.append(masked_l1_eval(model, eval_chips, eval_masks, pcfg.precision))

    train_loss: list[float] = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(pcfg.epochs):
        rng = np.random.default_rng([pcfg.seed, epoch])
        order = rng.permutation(n)
        model.train()
        running, batches = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * pcfg.batch_size:(b + 1) * pcfg.batch_size]
            x = data[idx]
            m = torch.as_tensor(mask_batch(len(idx), grid, pcfg.mask_ratio, config.patch, rng))
            loss = masked_l1_loss(model(x, m), x, m)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                if abort_checkpoint is not None:
                    from .store import save_checkpoint
                    save_checkpoint(abort_checkpoint, state)
                raise TrainingAbortError(f"non-finite loss at epoch {epoch} step {state.step}")
            params = named_params(model)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            lr = onecycle_lr(state.step, total_steps, pcfg.lr_start, pcfg.lr_max, pcfg.lr_final, pcfg.warm_frac)
            adamw_step(params, dict(zip(params, grads)), state.opt, lr, pcfg.betas, pcfg.weight_decay)
            clamp_temperatures(model)
            running += loss.item()
            batches += 1
        train_loss.append(running / batches)
        last_good = copy.deepcopy(model.state_dict())
        if eval_chips is not None:
            eval_loss.append(masked_l1_eval(model, eval_chips, eval_masks, pcfg.precision))
        logger.info("pretrain epoch %d loss %.5f", epoch + 1, train_loss[-1])
    return PretrainResult(state, train_loss, eval_loss)


def constant_mean_l1(train_chips: np.ndarray, eval_chips: np.ndarray, masks: np.ndarray) -> float:
    """Masked L1 of predicting the training-set per-band mean everywhere."""
    mean = train_chips.mean(axis=(0, 2, 3))[None, :, None, None]
    mf = np.broadcast_to(masks[:, None].astype(np.float64), eval_chips.shape)
    return float((np.abs(eval_chips - mean) * mf).sum() / mf.sum())


# --- reconstruction ------------------------------------------------------------------------

@torch.no_grad()
def reconstruct_batch(model: MimModel, chips: np.ndarray, masks: np.ndarray,
                      precision: int = 32) -> np.ndarray:
    """Composite reconstructions (N, C, H, W): model output inside the mask, originals outside, clamped to [0, 1]."""
    model.eval()
    dt = _dtype(precision)
    x = torch.as_tensor(chips, dtype=dt)
    m = torch.as_tensor(masks, dtype=torch.bool)
    pred = model(x, m).clamp(0.0, 1.0).numpy().astype(chips.dtype)
    keep = ~masks[:, None]
    return np.where(keep, chips, pred)


def reconstruct(chip: np.ndarray, mask: MaskSpec, state, precision: int = 32):
    """Reconstruct one (C, H, W) chip; returns ``(composite, per_channel_ssim)``."""
    model = getattr(state, "model", state)
    pm = mask.pixel_mask()[None]
    out = reconstruct_batch(model, chip[None], pm, precision)[0]
    per = M.ssim_per_channel(chip.transpose(1, 2, 0), out.transpose(1, 2, 0))
    return out, per


def mean_fill_baseline(chips: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Fill the masked region of each chip/band with the mean of that chip/band's visible pixels."""
    out = chips.copy()
    for i in range(len(chips)):
        m = masks[i]
        vis = ~m
        for b in range(chips.shape[1]):
            fill = chips[i, b][vis].mean() if vis.any() else chips[i, b].mean()
            out[i, b][m] = fill
    return out


def ssim_scores(originals: np.ndarray, recons: np.ndarray) -> np.ndarray:
    """(N, 14) per-channel SSIM for channel-first batches."""
    return np.stack([M.ssim_per_channel(a.transpose(1, 2, 0), b.transpose(1, 2, 0))
                     for a, b in zip(originals, recons)])


# --- fine-tuning -------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_start: float = 5e-7
    lr_max: float = 3e-4
    lr_final: float = 1e-6
    warm_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.05
    freeze_epochs: int = 2
    decoder_width: int = 32
    precision: int = 32
    seed: int = 0


def warmup_cosine_lr(step: int, total_steps: int, lr_start: float, lr_max: float, lr_final: float,
                     warm_frac: float) -> float:
    """Linear warm-up lr_start -> lr_max, then cosine decay to lr_final."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside 0..{total_steps}")
    warm = warm_frac * total_steps
    if step <= warm and warm > 0:
        return lr_start + (lr_max - lr_start) * step / warm
    frac = (step - warm) / (total_steps - warm) if total_steps > warm else 1.0
    return lr_final + (lr_max - lr_final) * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class FinetuneResult:
    model: CurtainModel
    report: M.MetricsReport
    train_loss: list[float]
    opt: OptimizerState


def stack_curtains(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.chip.chw() for s in samples])
    y = np.stack([s.curtain for s in samples]).astype(np.float32)
    return x, y


@torch.no_grad()
def predict_curtains(model: CurtainModel, x: np.ndarray, precision: int = 32, batch_size: int = 64) -> np.ndarray:
    """Cloud probabilities (N, H, bins)."""
    model.eval()
    dt = _dtype(precision)
    out = [torch.sigmoid(model(torch.as_tensor(x[i:i + batch_size], dtype=dt))).numpy()
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def curtain_report(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> M.MetricsReport:
    pred = probs >= threshold
    gt = labels.astype(bool)
    conf = M.confusion(pred, gt)
    rep = M.MetricsReport(miou=M.miou(pred, gt), accuracy=conf.accuracy,
                          false_negative_rate=conf.false_negative_rate,
                          false_positive_rate=conf.false_positive_rate)
    if gt.any() and not gt.all():
        points, auc = M.roc_auc(probs, gt)
        rep.roc_points = [tuple(p) for p in points.tolist()]
        rep.auc = auc
    return rep


def build_curtain_model(backbone: str, chip_size: int, height_bins: int,
                        encoder_config: EncoderConfig | None, fcfg: FinetuneConfig,
                        init: EncoderState | None = None) -> CurtainModel:
    model = CurtainModel(backbone, chip_size, height_bins, encoder_config, fcfg.decoder_width)
    init_weights(model, fcfg.seed + 17)
    if init is not None:
        if backbone != "swin":
            raise ParameterError("a pretrained init needs the swin backbone")
        model.encoder.load_state_dict(init.model.encoder.state_dict())
    return model.to(_dtype(fcfg.precision))


def finetune(train, val, backbone: str = "swin", init: EncoderState | None = None,
             encoder_config: EncoderConfig | None = None,
             fcfg: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Train a curtain model with per-pixel BCE and evaluate it on ``val``.

    With a pretrained ``init`` the encoder stays frozen for the first
    ``freeze_epochs`` epochs.  Data order, schedule and decoder are identical
    for every backbone, so runs differ only in the encoder.
    """
    x_tr, y_tr = stack_curtains(train)
    x_va, y_va = stack_curtains(val)
    chip = x_tr.shape[-1]
    bins = y_tr.shape[-1]
    if y_tr.shape[1] != x_tr.shape[-2]:
        raise ParameterError("curtain along-track length must equal chip height")
    if encoder_config is None and init is not None:
        encoder_config = init.config
    model = build_curtain_model(backbone, chip, bins, encoder_config, fcfg, init)
    dt = _dtype(fcfg.precision)
    xt = torch.as_tensor(x_tr, dtype=dt)
    yt = torch.as_tensor(y_tr, dtype=dt)
    n = len(xt)
    steps_per_epoch = math.ceil(n / fcfg.batch_size)
    total = steps_per_epoch * fcfg.epochs
    opt = OptimizerState()
    losses: list[float] = []
    for epoch in range(fcfg.epochs):
        frozen = init is not None and epoch < fcfg.freeze_epochs
        for p in model.encoder.parameters():
            p.requires_grad_(not frozen)
        rng = np.random.default_rng([fcfg.seed, 1000 + epoch])
        order = rng.permutation(n)
        model.train()
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * fcfg.batch_size:(b + 1) * fcfg.batch_size]
            logits = model(xt[idx])
            loss = F.binary_cross_entropy_with_logits(logits, yt[idx])
            if not torch.isfinite(loss):
                raise TrainingAbortError(f"non-finite fine-tune loss at epoch {epoch}")
            params = named_params(model)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            lr = warmup_cosine_lr(opt.step, total, fcfg.lr_start, fcfg.lr_max, fcfg.lr_final, fcfg.warm_frac)
            adamw_step(params, dict(zip(params, grads)), opt, lr, fcfg.betas, fcfg.weight_decay)
            clamp_temperatures(model)
            running += loss.item()
        losses.append(running / steps_per_epoch)
        logger.info("finetune[%s] epoch %d loss %.5f", backbone, epoch + 1, losses[-1])
    for p in model.parameters():
        p.requires_grad_(True)
    probs = predict_curtains(model, x_va, fcfg.precision)
    return FinetuneResult(model, curtain_report(probs, y_va), losses, opt)
