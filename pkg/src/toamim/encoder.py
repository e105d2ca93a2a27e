"""Toy SwinV2-style encoder with shifted-window cosine attention.

Token grids are channel-last, (N, G, G, d).  Each block is residual
post-norm::

    x = x + norm1(attn(x))
    x = x + norm2(mlp(x))

Attention logits are cos(q, k) / tau_head plus a relative-position bias
produced by a small MLP over signed log-spaced offsets.  Training uses a
hand-written AdamW step and a OneCycle cosine schedule; gradients come from
torch autograd and are audited against central differences by
:func:`grad_check`.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, TrainingAbortError
from .mim import LEARNED, ZERO


@dataclass(frozen=True)
class EncoderConfig:
    chip_size: int = 64
    in_bands: int = 14
    patch: int = 4
    window: int = 4
    depths: tuple[int, ...] = (2, 2)
    dims: tuple[int, ...] = (20, 40)
    heads: tuple[int, ...] = (2, 4)
    mlp_ratio: float = 2.0
    drop_path: float = 0.0
    tau_min: float = 0.01
    tau_init: float = 0.1
    bias_hidden: int = 32
    mask_token_mode: str = LEARNED

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "heads", tuple(self.heads))
        self.validate()

    def validate(self) -> None:
        if not (len(self.depths) == len(self.dims) == len(self.heads)) or not self.depths:
            raise ParameterError("depths, dims and heads need one entry per stage")
        if self.chip_size % self.patch:
            raise ParameterError(f"patch {self.patch} does not divide chip_size {self.chip_size}")
        for i, g in enumerate(self.grid_sizes):
            if g % self.window:
                raise ParameterError(f"window {self.window} does not divide stage-{i} grid {g}")
            if self.dims[i] % self.heads[i]:
                raise ParameterError(f"heads {self.heads[i]} do not divide dim {self.dims[i]}")
            if i and self.dims[i] != 2 * self.dims[i - 1]:
                raise ParameterError("each stage must double the embedding width")
        if self.mask_token_mode not in (ZERO, LEARNED):
            raise ParameterError(f"unknown mask_token_mode {self.mask_token_mode!r}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ParameterError("drop_path must lie in [0, 1)")

    @property
    def grid_sizes(self) -> list[int]:
        g = self.chip_size // self.patch
        sizes = []
        for _ in self.depths:
            sizes.append(g)
            g //= 2
        return sizes

    @property
    def out_stride(self) -> int:
        return self.patch * 2 ** (len(self.depths) - 1)

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("depths", "dims", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# --- window machinery ---------------------------------------------------------

def shift_region_labels(grid: int, window: int, shift: int) -> np.ndarray:
    """Region id of every token position in the rolled frame.

    After a cyclic shift by ``-shift`` the bottom/right strips hold tokens that
    wrapped around from the opposite edge; tokens in different regions must
    not attend to each other.
    """
    labels = np.zeros((grid, grid), dtype=np.int64)
    if shift == 0:
        return labels
    bounds = (slice(0, grid - window), slice(grid - window, grid - shift), slice(grid - shift, grid))
    n = 0
    for rs in bounds:
        for cs in bounds:
            labels[rs, cs] = n
            n += 1
    return labels


def _partition(x: torch.Tensor, w: int) -> torch.Tensor:
    n, g, _, d = x.shape
    x = x.view(n, g // w, w, g // w, w, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, d)


def _reverse(windows: torch.Tensor, w: int, g: int) -> torch.Tensor:
    d = windows.shape[-1]
    n = windows.shape[0] // ((g // w) ** 2)
    x = windows.view(n, g // w, g // w, w, w, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, g, g, d)


def window_partition(tokens: torch.Tensor, window: int, shift: int = 0):
    """Cyclic shift by ``-shift`` then split into non-overlapping windows.

    Returns ``(windows, allowed)``: windows (N * nW, w*w, d) and a boolean
    (nW, w*w, w*w) matrix, True where attention is permitted.
    """
    n, g, g2, d = tokens.shape
    if g != g2:
        raise ParameterError("token grid must be square")
    if g % window:
        raise ParameterError(f"window {window} does not divide grid {g}")
    if shift not in (0, window // 2):
        raise ParameterError(f"shift must be 0 or {window // 2}")
    if shift:
        tokens = torch.roll(tokens, shifts=(-shift, -shift), dims=(1, 2))
    windows = _partition(tokens, window)
    labels = torch.from_numpy(shift_region_labels(g, window, shift)).view(1, g, g, 1)
    lw = _partition(labels, window)[..., 0]
    allowed = lw[:, :, None] == lw[:, None, :]
    return windows, allowed


def window_reverse(windows: torch.Tensor, window: int, grid: int, shift: int = 0) -> torch.Tensor:
    x = _reverse(windows, window, grid)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


def relative_log_coords(window: int) -> torch.Tensor:
    """Signed log offsets sign(d) * log(1 + |d|) for every (query, key) pair: (w^2, w^2, 2)."""
    r = torch.arange(window)
    coords = torch.stack(torch.meshgrid(r, r, indexing="ij")).flatten(1)  # 2, w*w
    delta = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).double()
    return torch.sign(delta) * torch.log1p(delta.abs())


NORM_EPS = 1e-12


def smooth_normalize(x: torch.Tensor, eps: float | None = None) -> torch.Tensor:
    """x / sqrt(|x|^2 + eps): unit length for ordinary vectors, smooth through zero."""
    eps = NORM_EPS if eps is None else eps
    return x * torch.rsqrt((x * x).sum(dim=-1, keepdim=True) + eps)


def cosine_attention(q, k, v, tau, bias=None, allowed=None):
    """Scaled-cosine attention core.

    q, k, v: (B, h, n, hd); tau: (h,); bias: (h, n, n); allowed: bool (B, n, n)
    or broadcastable.  Returns ``(out, weights)`` with weights (B, h, n, n).
    """
    qn = smooth_normalize(q)
    kn = smooth_normalize(k)
    logits = (qn @ kn.transpose(-2, -1)) / tau.view(1, -1, 1, 1)
    if bias is not None:
        logits = logits + bias.unsqueeze(0)
    if allowed is not None:
        logits = logits.masked_fill(~allowed.unsqueeze(1), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, tau_min: float = 0.01,
                 tau_init: float = 0.1, bias_hidden: int = 32):
        super().__init__()
        self.dim, self.heads, self.window, self.tau_min = dim, heads, window, tau_min
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.tau = nn.Parameter(torch.full((heads,), float(tau_init)))
        self.bias_mlp = nn.Sequential(nn.Linear(2, bias_hidden), nn.GELU(),
                                      nn.Linear(bias_hidden, heads, bias=False))
        self.register_buffer("rel_coords", relative_log_coords(window).float(), persistent=False)

    def position_bias(self) -> torch.Tensor:
        coords = self.rel_coords.to(self.qkv.weight.dtype)
        return self.bias_mlp(coords).permute(2, 0, 1)  # h, n, n

    def temperatures(self) -> torch.Tensor:
        return self.tau.clamp(min=self.tau_min)

    def split_heads(self, x):
        b, n, _ = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, self.dim // self.heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x, allowed=None, return_weights: bool = False):
        b, n, d = x.shape
        q, k, v = self.split_heads(x)
        out, weights = cosine_attention(q, k, v, self.temperatures(), self.position_bias(), allowed)
        out = self.proj(out.transpose(1, 2).reshape(b, n, d))
        return (out, weights) if return_weights else out


def cosine_window_attention(windows, attn: WindowAttention, allowed=None):
    """Functional entry point: attention over (B, n, d) window tokens."""
    return attn(windows, allowed)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = torch.rand((x.shape[0],) + (1,) * (x.ndim - 1), dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, grid: int,
                 mlp_ratio: float = 2.0, drop_path: float = 0.0, tau_min: float = 0.01,
                 tau_init: float = 0.1, bias_hidden: int = 32):
        super().__init__()
        self.window, self.grid = window, grid
        self.shift = 0 if grid <= window else shift
        self.attn = WindowAttention(dim, heads, window, tau_min, tau_init, bias_hidden)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim)
        self.drop_path = DropPath(drop_path)
        _, allowed = window_partition(torch.zeros(1, grid, grid, 1), window, self.shift)
        self.register_buffer("allowed", allowed, persistent=False)

    def forward(self, x):
        n, g, _, d = x.shape
        windows, _ = window_partition(x, self.window, self.shift)
        allowed = self.allowed.repeat(n, 1, 1)
        attended = window_reverse(self.attn(windows, allowed), self.window, g, self.shift)
        x = x + self.drop_path(self.norm1(attended))
        x = x + self.drop_path(self.norm2(self.mlp(x)))
        return x


class PatchMerge(nn.Module):
    """Concatenate 2x2 neighbourhoods (4d), normalise, project to 2d."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        n, g, g2, d = x.shape
        if g % 2 or g2 % 2:
            raise ParameterError(f"patch merge needs an even grid, got {g}x{g2}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class PatchEmbed(nn.Module):
    """Non-overlapping p x p x bands patches, linearly projected (no norm, so the map stays linear)."""

    def __init__(self, in_bands: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_bands, dim, kernel_size=patch, stride=patch)

    def forward(self, x):
        if x.shape[-1] % self.patch or x.shape[-2] % self.patch or x.shape[1] != self.proj.in_channels:
            raise ParameterError(f"input {tuple(x.shape)} does not match the patch embedding")
        return self.proj(x).permute(0, 2, 3, 1)


def patch_embed(chip: torch.Tensor, module: PatchEmbed) -> torch.Tensor:
    return module(chip)


def patch_merge(tokens: torch.Tensor, module: PatchMerge) -> torch.Tensor:
    return module(tokens)


def swin_block(tokens: torch.Tensor, module: SwinBlock) -> torch.Tensor:
    return module(tokens)


class SwinEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = PatchEmbed(c.in_bands, c.dims[0], c.patch)
        self.mask_token = nn.Parameter(torch.full((c.in_bands,), 0.5))
        rates = np.linspace(0.0, c.drop_path, sum(c.depths)).tolist() if sum(c.depths) else []
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        k = 0
        for i, (depth, dim, heads) in enumerate(zip(c.depths, c.dims, c.heads)):
            g = c.grid_sizes[i]
            blocks = []
            for j in range(depth):
                shift = 0 if j % 2 == 0 else c.window // 2
                blocks.append(SwinBlock(dim, heads, c.window, shift, g, c.mlp_ratio, rates[k],
                                        c.tau_min, c.tau_init, c.bias_hidden))
                k += 1
            self.stages.append(nn.Sequential(*blocks))
            if i + 1 < len(c.depths):
                self.merges.append(PatchMerge(dim))

    def embed(self, x, pixel_mask=None):
        if pixel_mask is not None:
            m = pixel_mask.to(torch.bool).unsqueeze(1)
            if self.config.mask_token_mode == LEARNED:
                fill = self.mask_token.view(1, -1, 1, 1).to(x.dtype)
            else:
                fill = torch.zeros((), dtype=x.dtype)
            x = torch.where(m, fill, x)
        return self.patch_embed(x)

    def forward(self, x, pixel_mask=None):
        """Return ``(final_tokens, pyramid)``; pyramid holds each stage's output grid."""
        t = self.embed(x, pixel_mask)
        pyramid = []
        for i, stage in enumerate(self.stages):
            t = stage(t)
            pyramid.append(t)
            if i < len(self.merges):
                t = self.merges[i](t)
        return t, pyramid


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded truncated-normal init (std 1/sqrt(fan_in)) for linear/conv weights, zeros for biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel()
            w = torch.randn(m.weight.shape, generator=gen).clamp_(-2.0, 2.0) / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm, nn.BatchNorm2d)):
            with torch.no_grad():
                if m.weight is not None:
                    m.weight.fill_(1.0)
                    m.bias.zero_()


def encoder_forward(x, state_or_model, config: EncoderConfig | None = None, pixel_mask=None):
    model = getattr(state_or_model, "model", state_or_model)
    enc = getattr(model, "encoder", model)
    return enc(x, pixel_mask)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- optimisation ---------------------------------------------------------------

@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to matrices/kernels only, never to biases, norms, temperatures or tokens."""
    return p.ndim >= 2


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               opt: OptimizerState, lr: float, betas: tuple[float, float] = (0.9, 0.99),
               weight_decay: float = 0.05, eps: float = 1e-8) -> OptimizerState:
    """One AdamW update in place, with decoupled weight decay and bias correction."""
    bad = [n for n, g in grads.items() if g is not None and not torch.isfinite(g).all()]
    if bad:
        raise TrainingAbortError(f"non-finite gradients at step {opt.step} in: {', '.join(sorted(bad)[:5])}")
    b1, b2 = betas
    opt.step += 1
    bc1 = 1.0 - b1**opt.step
    bc2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = opt.exp_avg.get(name)
            if m is None:
                m = opt.exp_avg[name] = torch.zeros_like(p)
                opt.exp_avg_sq[name] = torch.zeros_like(p)
            v = opt.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if weight_decay and decays(name, p):
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return opt


def onecycle_lr(step: int, total_steps: int, lr_start: float = 5e-7, lr_max: float = 3e-4,
                lr_final: float = 1e-6, warm_frac: float = 0.1) -> float:
    """Cosine ramp lr_start -> lr_max over the warm fraction, cosine decay to lr_final after."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside 0..{total_steps}")
    warm = warm_frac * total_steps
    if step <= warm and warm > 0:
        return lr_start + (lr_max - lr_start) * (1.0 - math.cos(math.pi * step / warm)) / 2.0
    span = total_steps - warm
    frac = (step - warm) / span if span > 0 else 1.0
    return lr_final + (lr_max - lr_final) * (1.0 + math.cos(math.pi * frac)) / 2.0


def clamp_temperatures(model: nn.Module) -> None:
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, WindowAttention):
                m.tau.clamp_(min=m.tau_min)


# --- gradient verification ------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: list[tuple[str, int, float, float, float]]  # name, flat index, analytic, numeric, rel

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0.0 else abs(a - n) / denom


def grad_check(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor], n_probes: int = 64,
               epsilon: float = 1e-5, seed: int = 0,
               param_filter: Callable[[str], bool] | None = None) -> GradCheckResult:
    """Compare autograd gradients with central differences on random scalar parameters.

    The model is deep-copied to float64 first.  Probes pick a parameter tensor
    uniformly, then an element uniformly, so small tensors (temperatures,
    mask token) are exercised too.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad and (param_filter is None or param_filter(n))]
    params = [p for _, p in named]
    loss = loss_fn(m)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    probes = []
    worst = 0.0
    for _ in range(n_probes):
        t = int(rng.integers(len(named)))
        name, p = named[t]
        idx = int(rng.integers(p.numel()))
        g = grads[t]
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        flat = p.data.view(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + epsilon
            f_plus = float(loss_fn(m))
            flat[idx] = orig - epsilon
            f_minus = float(loss_fn(m))
            flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        rel = relative_error(analytic, numeric)
        worst = max(worst, rel)
        probes.append((name, idx, analytic, numeric, rel))
    return GradCheckResult(worst, probes)
