"""CNN mapping a 13-row structural window plus persistence features to the
intensity at the window's end time.

The image input is 6 x 13 x 80: four quadrant-temperature channels
(standardized by training statistics inside the network graph) plus two
constant coordinate channels encoding radial and temporal pixel location,
which deliberately break the translation invariance of plain convolutions.
Persistence features are intensities at 6-h spacing up to 6 h before the
valid time and short-term intensity changes from the 2-h interpolated
series.

Persistence enters after the convolutional trunk and passes only through
linear layers, so the output is exactly affine in the persistence vector for
any fixed image.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .profiles import N_BINS, N_QUADRANTS, N_OBSERVED_ROWS, StructuralTrajectory
from .structsim import CHECKPOINT_FORMAT

N_IMAGE_CHANNELS = 6
VMAX_CLAMP_KT = (0.0, 200.0)

# Valid-time offsets (hours) of the 6-h persistence intensities.
PERSISTENCE_OFFSETS_H = (-30, -24, -18, -12, -6)


@dataclass
class NowcastFeatures:
    """Model input for one valid time.

    ``image`` is (6, 13, 80): channels 0-3 quadrant temperatures in degC
    (raw; the network standardizes), channel 4 the radius coordinate
    (bin center km / 400), channel 5 the time coordinate (row age h / 24).
    ``persistence`` holds the intensity values followed by the intensity
    changes, in offset order.
    """

    image: np.ndarray
    persistence: np.ndarray
    valid_time: datetime | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.persistence = np.asarray(self.persistence, dtype=float)
        if self.image.shape != (N_IMAGE_CHANNELS, N_OBSERVED_ROWS, N_BINS):
            raise ValueError(f"image must be {(N_IMAGE_CHANNELS, N_OBSERVED_ROWS, N_BINS)}")
        if not np.all(np.isfinite(self.persistence)):
            raise ValueError("persistence vector must be finite")


def coordinate_channels() -> np.ndarray:
    """The two constant location channels, shape (2, 13, 80)."""
    radius = (np.arange(N_BINS) * 5.0 + 2.5) / 400.0
    age = (np.arange(N_OBSERVED_ROWS)[::-1] * 2.0) / 24.0
    out = np.empty((2, N_OBSERVED_ROWS, N_BINS))
    out[0] = np.broadcast_to(radius, (N_OBSERVED_ROWS, N_BINS))
    out[1] = np.broadcast_to(age[:, None], (N_OBSERVED_ROWS, N_BINS))
    return out


def persistence_dim(delta_resolution: str) -> int:
    if delta_resolution == "six_hourly":
        return 10
    if delta_resolution == "two_hourly":
        return 5 + 13
    raise ValueError(f"unknown delta_resolution {delta_resolution!r}")


def build_features(window, intensities: Mapping[datetime, float], t: datetime,
                   delta_resolution: str = "six_hourly") -> NowcastFeatures:
    """Assemble features for a prediction valid at ``t``.

    ``window`` is the 13-row trajectory ending at t (array or
    StructuralTrajectory); ``intensities`` is a 2-h-resolution series (kt)
    that must cover t-32h .. t-6h.  ``delta_resolution`` selects intensity
    changes at the five 6-h offsets (default) or at every 2-h offset in
    [-30, -6].
    """
    if isinstance(window, StructuralTrajectory):
        rows = window.rows
    else:
        rows = np.asarray(window, dtype=float)
    if rows.shape != (N_OBSERVED_ROWS, N_BINS, N_QUADRANTS):
        raise ValueError(f"window must have shape {(N_OBSERVED_ROWS, N_BINS, N_QUADRANTS)}")

    needed = [t + timedelta(hours=h) for h in range(-32, -4, 2)]
    missing = [w for w in needed if w not in intensities]
    if missing:
        listing = ", ".join(m.isoformat() for m in missing)
        raise ValueError(f"intensity series missing times: {listing}")

    image = np.empty((N_IMAGE_CHANNELS, N_OBSERVED_ROWS, N_BINS))
    image[:N_QUADRANTS] = rows.transpose(2, 0, 1)
    image[N_QUADRANTS:] = coordinate_channels()

    values = [intensities[t + timedelta(hours=h)] for h in PERSISTENCE_OFFSETS_H]
    if delta_resolution == "six_hourly":
        delta_offsets = PERSISTENCE_OFFSETS_H
    elif delta_resolution == "two_hourly":
        delta_offsets = tuple(range(-30, -4, 2))
    else:
        raise ValueError(f"unknown delta_resolution {delta_resolution!r}")
    deltas = [
        intensities[t + timedelta(hours=h)] - intensities[t + timedelta(hours=h - 2)]
        for h in delta_offsets
    ]
    return NowcastFeatures(
        image=image, persistence=np.array(values + deltas, dtype=float), valid_time=t
    )


# ---------------------------------------------------------------------------
# Network


@dataclass
class NowcastConfig:
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3
    fc_width: int = 64
    head_width: int = 32
    delta_resolution: str = "six_hourly"
    # training
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.2


class NowcastNet(nn.Module):
    """Three conv+maxpool pairs, one hidden regression layer, then a purely
    linear head over [trunk features, persistence].

    Standardization constants are registered buffers applied inside the
    graph, so gradients are taken with respect to raw physical inputs.
    """

    def __init__(self, config: NowcastConfig, image_mean, image_std,
                 pers_mean, pers_std, y_mean: float, y_std: float):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.conv_channels
        k = config.kernel
        self.conv1 = nn.Conv2d(N_IMAGE_CHANNELS, c1, k, padding=k // 2)
        self.conv2 = nn.Conv2d(c1, c2, k, padding=k // 2)
        self.conv3 = nn.Conv2d(c2, c3, k, padding=k // 2)
        rows, cols = N_OBSERVED_ROWS, N_BINS
        for _ in range(3):
            rows, cols = rows // 2, cols // 2
        p = persistence_dim(config.delta_resolution)
        self.fc1 = nn.Linear(c3 * rows * cols, config.fc_width)
        # No activation after the concatenation: the persistence path stays
        # exactly affine into the output.
        self.fc2 = nn.Linear(config.fc_width + p, config.head_width)
        self.out = nn.Linear(config.head_width, 1)

        def buf(name, value):
            self.register_buffer(name, torch.as_tensor(value, dtype=torch.float64))

        buf("image_mean", np.asarray(image_mean, dtype=float).reshape(1, N_QUADRANTS, 1, 1))
        buf("image_std", np.asarray(image_std, dtype=float).reshape(1, N_QUADRANTS, 1, 1))
        buf("pers_mean", np.asarray(pers_mean, dtype=float))
        buf("pers_std", np.asarray(pers_std, dtype=float))
        buf("y_mean", float(y_mean))
        buf("y_std", float(y_std))
        self.double()

    def forward(self, image: torch.Tensor, persistence: torch.Tensor) -> torch.Tensor:
        x = torch.cat(
            [(image[:, :N_QUADRANTS] - self.image_mean) / self.image_std, image[:, N_QUADRANTS:]],
            dim=1,
        )
        p = (persistence - self.pers_mean) / self.pers_std
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.max_pool2d(F.relu(self.conv3(h)), 2)
        h = F.relu(self.fc1(h.flatten(1)))
        h = self.fc2(torch.cat([h, p], dim=1))
        return (self.y_mean + self.y_std * self.out(h)).squeeze(-1)


@dataclass
class NowcastModel:
    net: NowcastNet
    config: NowcastConfig
    training_log: list[dict] = field(default_factory=list)
    seed: int | None = None

    def output_tensor(self, features: NowcastFeatures,
                      requires_grad: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Differentiable unclamped output plus the leaf input tensors."""
        image = torch.from_numpy(np.ascontiguousarray(features.image))[None]
        pers = torch.from_numpy(np.ascontiguousarray(features.persistence))[None]
        image.requires_grad_(requires_grad)
        pers.requires_grad_(requires_grad)
        return self.net(image, pers)[0], image, pers


def predict_now(model: NowcastModel, features: NowcastFeatures) -> float:
    """Point intensity in knots, clamped to the physical range."""
    model.net.eval()
    with torch.no_grad():
        y, _, _ = model.output_tensor(features)
    return float(np.clip(y.item(), *VMAX_CLAMP_KT))


def _stack(dataset: Sequence[NowcastFeatures]):
    images = torch.from_numpy(np.stack([f.image for f in dataset]))
    pers = torch.from_numpy(np.stack([f.persistence for f in dataset]))
    return images, pers


def train(dataset: Sequence[NowcastFeatures], targets, config: NowcastConfig | None = None,
          seed: int = 0, holdout: tuple[Sequence[NowcastFeatures], Sequence[float]] | None = None
          ) -> NowcastModel:
    """Fit by mean squared error; returns the best-held-out-MSE weights.

    Deterministic for a fixed seed on CPU.  When no holdout is supplied,
    every k-th example is set aside per ``holdout_fraction``.
    """
    cfg = config or NowcastConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    targets = np.asarray(targets, dtype=float)
    if len(dataset) != targets.shape[0]:
        raise ValueError("dataset and targets length mismatch")
    if holdout is None:
        every = max(2, int(round(1.0 / cfg.holdout_fraction)))
        idx = np.arange(len(dataset))
        hold_idx = idx[idx % every == 0]
        train_idx = idx[idx % every != 0]
        holdout = ([dataset[i] for i in hold_idx], targets[hold_idx])
        dataset = [dataset[i] for i in train_idx]
        targets = targets[train_idx]

    images, pers = _stack(dataset)
    y = torch.from_numpy(targets)
    hold_images, hold_pers = _stack(holdout[0])
    hold_y = torch.from_numpy(np.asarray(holdout[1], dtype=float))

    image_mean = images[:, :N_QUADRANTS].mean(dim=(0, 2, 3)).numpy()
    image_std = np.maximum(images[:, :N_QUADRANTS].std(dim=(0, 2, 3)).numpy(), 1e-6)
    pers_mean = pers.mean(dim=0).numpy()
    pers_std = np.maximum(pers.std(dim=0).numpy(), 1e-6)

    torch.manual_seed(seed)
    net = NowcastNet(
        cfg, image_mean, image_std, pers_mean, pers_std,
        y_mean=float(y.mean()), y_std=max(float(y.std()), 1e-6),
    )
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    shuffler = torch.Generator().manual_seed(seed)

    def mse(im, pe, yy) -> float:
        net.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, im.shape[0], cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                pred = net(im[sl], pe[sl])
                total += float(((pred - yy[sl]) ** 2).sum())
                count += pred.shape[0]
        return total / count

    log: list[dict] = []
    best = math.inf
    best_state = copy.deepcopy(net.state_dict())
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(images.shape[0], generator=shuffler)
        for start in range(0, images.shape[0], cfg.batch_size):
            sl = perm[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = ((net(images[sl], pers[sl]) - y[sl]) ** 2).mean()
            loss.backward()
            optimizer.step()
        hold_mse = mse(hold_images, hold_pers, hold_y) if hold_images.shape[0] else mse(images, pers, y)
        log.append({"epoch": epoch, "train_mse": mse(images, pers, y), "holdout_mse": hold_mse})
        if hold_mse < best:
            best = hold_mse
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return NowcastModel(net=net, config=cfg, training_log=log, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: NowcastModel, path: str | os.PathLike) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "kind": "nowcast",
            "config": asdict(model.config),
            "state_dict": model.net.state_dict(),
            "training_log": model.training_log,
            "seed": model.seed,
        },
        os.fspath(path),
    )


def load_checkpoint(path: str | os.PathLike) -> NowcastModel:
    blob = torch.load(os.fspath(path), weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("kind") != "nowcast":
        raise ValueError(f"not a nowcast checkpoint: {path}")
    cfg_dict = dict(blob["config"])
    cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
    cfg = NowcastConfig(**cfg_dict)
    state = blob["state_dict"]
    p = persistence_dim(cfg.delta_resolution)
    net = NowcastNet(
        cfg,
        image_mean=np.zeros(N_QUADRANTS), image_std=np.ones(N_QUADRANTS),
        pers_mean=np.zeros(p), pers_std=np.ones(p), y_mean=0.0, y_std=1.0,
    )
    net.load_state_dict(state)
    net.eval()
    return NowcastModel(net=net, config=cfg, training_log=blob["training_log"], seed=blob["seed"])
