"""Autoregressive generative model over structural-trajectory images.

Trajectory windows (rows x 80 bins x 4 quadrants) are treated as images with
a raster-scan order: rows top to bottom (oldest time first), columns left to
right (radius increasing).  The four quadrant values at one (row, column)
position form a single raster element; their joint law factorizes into four
independent logistic mixtures that share the same causal context, namely all
raster elements strictly before the current one.

Causality is enforced structurally: the first convolution masks out the
current and all later raster positions, later convolutions and the causal
self-attention layer only ever read features at or before the current
position, which themselves depend only on strictly earlier pixels.

Temperatures are mapped into (0, 1) by an affine rescaling with a safety
margin and modeled in logit space, so inverse-transformed samples are always
strictly inside the scaling interval.
"""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import mixlogistic
from .mixlogistic import MixtureParams, SCALE_FLOOR
from .profiles import (
    MAX_SIMULATED_ROWS,
    N_BINS,
    N_OBSERVED_ROWS,
    N_QUADRANTS,
    StructuralTrajectory,
)

logger = logging.getLogger(__name__)

WINDOW_ROWS = N_OBSERVED_ROWS + MAX_SIMULATED_ROWS  # 19-row training canvas
CHECKPOINT_FORMAT = "cycast.checkpoint.v1"


# ---------------------------------------------------------------------------
# Temperature scaling


@dataclass(frozen=True)
class ScalingSpec:
    """Affine map between Celsius and the (0, 1) interval.

    ``t_min``/``t_max`` extend the training data range by ``margin`` on each
    side, so every training value lands strictly inside (0, 1).
    """

    t_min: float
    t_max: float
    margin: float = 5.0

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError("t_min must be below t_max")

    @classmethod
    def from_data(cls, data, margin: float = 5.0) -> "ScalingSpec":
        arr = np.asarray(data, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scaling data must be finite")
        return cls(t_min=float(arr.min() - margin), t_max=float(arr.max() + margin), margin=margin)

    @property
    def span(self) -> float:
        return self.t_max - self.t_min


def to_logit(temps, scaling: ScalingSpec) -> np.ndarray:
    """Map Celsius strictly inside (t_min, t_max) to logit space."""
    t = np.asarray(temps, dtype=float)
    if t.size and (t.min() <= scaling.t_min or t.max() >= scaling.t_max):
        bad = t.min() if t.min() <= scaling.t_min else t.max()
        raise ValueError(
            f"temperature {bad} outside the open scaling interval "
            f"({scaling.t_min}, {scaling.t_max})"
        )
    x = (t - scaling.t_min) / scaling.span
    return np.log(x / (1.0 - x))


def from_logit(z, scaling: ScalingSpec) -> np.ndarray:
    """Map logit space back to Celsius, strictly inside (t_min, t_max)."""
    z = np.asarray(z, dtype=float)
    x = 1.0 / (1.0 + np.exp(-z))
    x = np.clip(x, 1e-7, 1.0 - 1e-7)
    return scaling.t_min + scaling.span * x


def _clamp_into_scaling(temps: np.ndarray, scaling: ScalingSpec) -> np.ndarray:
    """Pull values outside the scaling interval inward by margin/2, warning."""
    lo = scaling.t_min + scaling.margin / 2.0
    hi = scaling.t_max - scaling.margin / 2.0
    out = np.asarray(temps, dtype=float)
    outside = (out <= scaling.t_min) | (out >= scaling.t_max)
    if np.any(outside):
        logger.warning(
            "%d temperatures outside scaling range (%.1f, %.1f); clamping inward",
            int(outside.sum()), scaling.t_min, scaling.t_max,
        )
        out = out.copy()
        out[outside] = np.clip(out[outside], lo, hi)
    return out


# ---------------------------------------------------------------------------
# Network


def _raster_mask(kernel: int, include_center: bool) -> torch.Tensor:
    """Spatial mask selecting kernel taps at raster positions before (and
    optionally at) the center.  No channel sub-masking: the quadrant channels
    of one pixel are a single raster element."""
    mask = torch.zeros(kernel, kernel)
    mask[: kernel // 2, :] = 1.0
    mask[kernel // 2, : kernel // 2] = 1.0
    if include_center:
        mask[kernel // 2, kernel // 2] = 1.0
    return mask


class MaskedConv2d(nn.Conv2d):
    """2-D convolution whose kernel is zeroed at and after the raster center.

    mask_type "A" excludes the center tap (used on raw pixel input), "B"
    includes it (used on hidden features, which are already causal).
    """

    def __init__(self, mask_type: str, in_channels: int, out_channels: int, kernel: int):
        super().__init__(in_channels, out_channels, kernel, padding=kernel // 2)
        if mask_type not in ("A", "B"):
            raise ValueError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
        self.register_buffer("mask", _raster_mask(kernel, include_center=mask_type == "B"))

    def forward(self, x):
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention over the flattened raster sequence.

    Position i attends to positions j <= i.  Applied to hidden features that
    are already causal, this preserves the strictly-before dependence of the
    final pixel distributions.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly among heads")
        self.heads = heads
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        n = h * w
        hd = c // self.heads
        q, k, v = self.qkv(x).reshape(b, 3, self.heads, hd, n).transpose(-1, -2).unbind(dim=1)
        # Contiguous inputs keep sdpa on its fast fused path.
        out = F.scaled_dot_product_attention(
            q.contiguous(), k.contiguous(), v.contiguous(), is_causal=True
        )  # position i attends to j <= i
        out = out.transpose(-1, -2).reshape(b, c, h, w)
        return self.proj(out)


class ResidualMaskedBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = MaskedConv2d("B", channels, channels, 3)
        self.conv2 = MaskedConv2d("B", channels, channels, 3)

    def forward(self, x):
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        return x + h


@dataclass
class StructSimConfig:
    mixture_components: int = 3
    channels: int = 32
    residual_blocks: int = 2
    attention_heads: int = 2
    conv_in_kernel: int = 5
    scaling_margin: float = 5.0
    # training
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"  # or "constant"
    holdout_fraction: float = 0.2
    # sampling
    sample_chunk: int = 32


class TrajectoryDensityNet(nn.Module):
    """Masked-convolution + causal-attention trunk emitting per-pixel raw
    mixture parameters of shape (B, 4, 3K, H, W)."""

    def __init__(self, config: StructSimConfig):
        super().__init__()
        c = config.channels
        k = config.mixture_components
        self.config = config
        self.conv_in = MaskedConv2d("A", N_QUADRANTS, c, config.conv_in_kernel)
        self.coord_proj = nn.Conv2d(2, c, 1)
        self.blocks = nn.ModuleList(ResidualMaskedBlock(c) for _ in range(config.residual_blocks))
        self.attention = CausalSelfAttention(c, config.attention_heads)
        self.head1 = nn.Conv2d(c, c, 1)
        self.head2 = nn.Conv2d(c, N_QUADRANTS * 3 * k, 1)

    def _coords(self, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
        # Row coordinate is absolute within the full training canvas so that
        # cropped sampling windows see the same encoding as training.
        rows = torch.arange(h, dtype=like.dtype, device=like.device) / (WINDOW_ROWS - 1)
        cols = torch.arange(w, dtype=like.dtype, device=like.device) / (w - 1)
        grid = torch.stack(
            [rows[:, None].expand(h, w), cols[None, :].expand(h, w)]
        )
        return grid.unsqueeze(0)

    def forward(self, x):
        b, c, h, w = x.shape
        if c != N_QUADRANTS or w != N_BINS or h > WINDOW_ROWS:
            raise ValueError(
                f"expected (B, {N_QUADRANTS}, <= {WINDOW_ROWS}, {N_BINS}) input, got {tuple(x.shape)}"
            )
        feats = self.conv_in(x) + self.coord_proj(self._coords(h, w, x).expand(b, -1, -1, -1))
        for block in self.blocks:
            feats = block(feats)
        feats = feats + self.attention(feats)
        feats = self.head2(F.relu(self.head1(F.relu(feats))))
        k = self.config.mixture_components
        return feats.reshape(b, N_QUADRANTS, 3 * k, h, w)


def _torch_constrain(raw: torch.Tensor):
    """Torch twin of mixlogistic.constrain_raw_params; raw is (..., 3K)."""
    k = raw.shape[-1] // 3
    log_weights = F.log_softmax(raw[..., :k], dim=-1)
    locations = raw[..., k : 2 * k]
    scales = F.softplus(raw[..., 2 * k :]) + SCALE_FLOOR
    return log_weights, locations, scales


def _torch_mixture_nll(raw: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean negative log-density per quadrant scalar.

    ``raw`` is the network output (B, 4, 3K, H, W); ``z`` the logit-space
    window (B, 4, H, W).
    """
    raw = raw.permute(0, 1, 3, 4, 2)  # (B, 4, H, W, 3K)
    log_weights, locations, scales = _torch_constrain(raw)
    a = (z.unsqueeze(-1) - locations) / scales
    comp = -a - torch.log(scales) - 2.0 * F.softplus(-a)
    return -torch.logsumexp(log_weights + comp, dim=-1).mean()


# ---------------------------------------------------------------------------
# Model wrapper


@dataclass
class StructSimModel:
    net: TrajectoryDensityNet
    scaling: ScalingSpec
    config: StructSimConfig
    training_log: list[dict] = field(default_factory=list)
    seed: int | None = None

    def forward(self, window_logit: np.ndarray) -> MixtureParams:
        """Per-pixel mixture parameters for a logit-space (H, 80, 4) window.

        Returned arrays are shaped (H, 80, 4, K); parameters at raster index
        i depend only on pixels strictly before i.
        """
        window = np.asarray(window_logit, dtype=float)
        if window.ndim != 3 or window.shape[1:] != (N_BINS, N_QUADRANTS):
            raise ValueError(f"window must be (H, {N_BINS}, {N_QUADRANTS}), got {window.shape}")
        x = torch.from_numpy(window.transpose(2, 0, 1)[None]).float()
        self.net.eval()
        with torch.no_grad():
            raw = self.net(x)[0]  # (4, 3K, H, W)
        raw = raw.permute(2, 3, 0, 1).double().numpy()  # (H, W, 4, 3K)
        return mixlogistic.constrain_raw_params(raw)


def nll(model: StructSimModel, windows_logit) -> float:
    """Mean negative log-likelihood over a dataset of logit-space windows,
    in nats per quadrant scalar."""
    windows = np.asarray(windows_logit, dtype=float)
    if windows.ndim == 3:
        windows = windows[None]
    if windows.shape[0] == 0:
        raise ValueError("empty dataset")
    total = 0.0
    count = 0
    for window in windows:
        params = model.forward(window)
        logp = mixlogistic.mol_logpdf(window, params)  # (H, W, 4)
        total += -logp.sum()
        count += logp.size
    return float(total / count)


def temperature_space_nll(model: StructSimModel, windows_degc) -> float:
    """NLL re-expressed per Celsius scalar via the exact change of variables
    T = t_min + span * sigmoid(z): adds the mean log-Jacobian log(span *
    x * (1 - x)) evaluated at the data."""
    windows = np.asarray(windows_degc, dtype=float)
    windows = _clamp_into_scaling(windows, model.scaling)
    z = to_logit(windows, model.scaling)
    x = (windows - model.scaling.t_min) / model.scaling.span
    log_jac = np.log(model.scaling.span * x * (1.0 - x))
    return nll(model, z) + float(np.mean(log_jac))


def train(windows_degc, config: StructSimConfig | None = None, seed: int = 0,
          holdout_degc=None) -> StructSimModel:
    """Fit the density model on Celsius windows.

    Scaling is fit over everything passed in (train plus holdout) so the
    logit transform is total on both.  When no explicit holdout is given,
    every k-th window is set aside per ``holdout_fraction``.  Returns the
    weights from the epoch with the best held-out NLL; deterministic for a
    fixed seed on CPU.
    """
    cfg = config or StructSimConfig()
    windows = np.asarray(windows_degc, dtype=float)
    if windows.ndim != 4 or windows.shape[1:] != (WINDOW_ROWS, N_BINS, N_QUADRANTS):
        raise ValueError(
            f"windows must be (N, {WINDOW_ROWS}, {N_BINS}, {N_QUADRANTS}), got {windows.shape}"
        )
    if holdout_degc is not None:
        holdout = np.asarray(holdout_degc, dtype=float)
    else:
        every = max(2, int(round(1.0 / cfg.holdout_fraction)))
        mask = np.arange(windows.shape[0]) % every == 0
        holdout = windows[mask]
        windows = windows[~mask]
    if windows.shape[0] < cfg.batch_size:
        raise ValueError(
            f"{windows.shape[0]} training windows is smaller than one batch ({cfg.batch_size})"
        )

    scaling = ScalingSpec.from_data(
        np.concatenate([windows.reshape(-1), holdout.reshape(-1)]), margin=cfg.scaling_margin
    )
    z_train = torch.from_numpy(
        to_logit(windows, scaling).transpose(0, 3, 1, 2)
    ).float()
    z_hold = torch.from_numpy(
        to_logit(holdout, scaling).transpose(0, 3, 1, 2)
    ).float()

    torch.manual_seed(seed)
    net = TrajectoryDensityNet(cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    elif cfg.lr_schedule == "constant":
        scheduler = None
    else:
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    shuffler = torch.Generator().manual_seed(seed)

    def dataset_nll(data: torch.Tensor) -> float:
        net.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, data.shape[0], cfg.batch_size):
                batch = data[start : start + cfg.batch_size]
                total += float(_torch_mixture_nll(net(batch), batch)) * batch.shape[0]
                count += batch.shape[0]
        return total / count

    log: list[dict] = []
    best_nll = math.inf
    best_state = copy.deepcopy(net.state_dict())
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(z_train.shape[0], generator=shuffler)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, z_train.shape[0], cfg.batch_size):
            batch = z_train[perm[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = _torch_mixture_nll(net(batch), batch)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        if scheduler is not None:
            scheduler.step()
        hold_nll = dataset_nll(z_hold) if z_hold.shape[0] else epoch_loss / n_batches
        log.append({"epoch": epoch, "train_nll": epoch_loss / n_batches, "holdout_nll": hold_nll})
        if hold_nll < best_nll:
            best_nll = hold_nll
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return StructSimModel(net=net, scaling=scaling, config=cfg, training_log=log, seed=seed)


# ---------------------------------------------------------------------------
# Simulation


def _simulate_batch(model: StructSimModel, observed_degc: np.ndarray, steps: int,
                    rngs: Sequence[np.random.Generator], anchor_time) -> list[StructuralTrajectory]:
    """Sample ``steps`` new rows for each rng stream, pixel by pixel in
    raster order.  Members are batched through the network but consume their
    own rng streams, so results match one-at-a-time simulation."""
    observed = np.asarray(observed_degc, dtype=float)
    if observed.shape != (N_OBSERVED_ROWS, N_BINS, N_QUADRANTS):
        raise ValueError(
            f"observed trajectory must be ({N_OBSERVED_ROWS}, {N_BINS}, {N_QUADRANTS}), "
            f"got {observed.shape}"
        )
    if not np.all(np.isfinite(observed)):
        raise ValueError("observed rows must be finite")
    if not 1 <= steps <= MAX_SIMULATED_ROWS:
        raise ValueError(f"steps must be in 1..{MAX_SIMULATED_ROWS}, got {steps}")

    clamped = _clamp_into_scaling(observed, model.scaling)
    z_obs = to_logit(clamped, model.scaling)

    n_members = len(rngs)
    total_rows = N_OBSERVED_ROWS + steps
    trajectories: list[StructuralTrajectory] = []
    model.net.eval()
    chunk = max(1, model.config.sample_chunk)
    for start in range(0, n_members, chunk):
        sub = rngs[start : start + chunk]
        b = len(sub)
        canvas = torch.zeros(b, N_QUADRANTS, total_rows, N_BINS)
        canvas[:, :, :N_OBSERVED_ROWS, :] = torch.from_numpy(
            z_obs.transpose(2, 0, 1)
        ).float()
        with torch.no_grad():
            for r in range(N_OBSERVED_ROWS, total_rows):
                for c in range(N_BINS):
                    raw = model.net(canvas[:, :, : r + 1, :])[:, :, :, r, c]  # (b, 4, 3K)
                    params = mixlogistic.constrain_raw_params(raw.double().numpy())
                    for m, rng in enumerate(sub):
                        z = mixlogistic.mol_sample(
                            MixtureParams(
                                log_weights=params.log_weights[m],
                                locations=params.locations[m],
                                scales=params.scales[m],
                            ),
                            rng,
                        )
                        canvas[m, :, r, c] = torch.from_numpy(z).float()
        sim_z = canvas[:, :, N_OBSERVED_ROWS:, :].numpy().transpose(0, 2, 3, 1)
        sim_t = from_logit(sim_z, model.scaling)
        for m in range(b):
            rows = np.concatenate([observed, sim_t[m]], axis=0)
            trajectories.append(
                StructuralTrajectory(
                    rows=rows,
                    n_observed=N_OBSERVED_ROWS,
                    n_simulated=steps,
                    anchor_time=anchor_time,
                )
            )
    return trajectories


def simulate_completion(model: StructSimModel, observed: StructuralTrajectory, steps: int,
                        rng: np.random.Generator) -> StructuralTrajectory:
    """Append ``steps`` stochastically simulated rows to a 13-row history."""
    if observed.n_simulated != 0 or observed.n_observed != N_OBSERVED_ROWS:
        raise ValueError("simulate_completion expects a pure 13-row observed trajectory")
    return _simulate_batch(model, observed.rows, steps, [rng], observed.anchor_time)[0]


def ensemble(model: StructSimModel, observed: StructuralTrajectory, n: int, steps: int,
             rng_or_seed) -> list[StructuralTrajectory]:
    """n independent completions with decorrelated per-member rng streams.

    Accepts a master seed or a SeedSequence-backed Generator; member order is
    deterministic for a fixed master seed.
    """
    if n < 1:
        raise ValueError("ensemble size must be at least 1")
    if observed.n_simulated != 0 or observed.n_observed != N_OBSERVED_ROWS:
        raise ValueError("ensemble expects a pure 13-row observed trajectory")
    rngs = member_streams(rng_or_seed, n)
    return _simulate_batch(model, observed.rows, steps, rngs, observed.anchor_time)


def member_streams(rng_or_seed, n: int) -> list[np.random.Generator]:
    """Per-member generators derived from a master seed (or Generator or
    SeedSequence)."""
    if isinstance(rng_or_seed, np.random.Generator):
        children = rng_or_seed.bit_generator.seed_seq.spawn(n)
    elif isinstance(rng_or_seed, np.random.SeedSequence):
        children = rng_or_seed.spawn(n)
    else:
        children = np.random.SeedSequence(rng_or_seed).spawn(n)
    return [np.random.default_rng(c) for c in children]


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: StructSimModel, path: str | os.PathLike) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": "structsim",
            "config": asdict(model.config),
            "scaling": asdict(model.scaling),
            "state_dict": model.net.state_dict(),
            "training_log": model.training_log,
            "seed": model.seed,
        },
        os.fspath(path),
    )


def load_checkpoint(path: str | os.PathLike) -> StructSimModel:
    blob = torch.load(os.fspath(path), weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("kind") != "structsim":
        raise ValueError(f"not a structsim checkpoint: {path}")
    cfg = StructSimConfig(**blob["config"])
    net = TrajectoryDensityNet(cfg)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return StructSimModel(
        net=net,
        scaling=ScalingSpec(**blob["scaling"]),
        config=cfg,
        training_log=blob["training_log"],
        seed=blob["seed"],
    )
