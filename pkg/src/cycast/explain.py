"""Attribution of intensity predictions to input pixels and channels.

Two complementary views: gradient saliency (absolute partial derivative of
the output with respect to each input) and a Monte-Carlo Shapley estimate
over channel groups, where absent channels are replaced by baseline values
(per-channel training means by default).  Because persistence features reach
the output through linear layers only, their saliencies are constant across
inputs for a fixed model.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Sequence

import numpy as np
import torch

from .nowcast import (
    N_IMAGE_CHANNELS,
    NowcastFeatures,
    NowcastModel,
    coordinate_channels,
)
from .profiles import N_BINS, N_OBSERVED_ROWS, N_QUADRANTS, QUADRANT_ORDER

IMAGE_CHANNEL_NAMES = QUADRANT_ORDER + ("radius", "time")


@dataclass
class SaliencyMap:
    """Absolute output gradients for one input."""

    image: np.ndarray          # (6, 13, 80), nonnegative
    persistence: np.ndarray    # (P,), nonnegative
    channel_totals: dict[str, float]
    time: datetime | None = None


def gradient_saliency(model: NowcastModel, features: NowcastFeatures) -> SaliencyMap:
    """|dY/dx_i| at ``features`` for every pixel and persistence entry.

    Channel totals sum the per-pixel saliencies within each image channel;
    the persistence entries aggregate into intensity and intensity-change
    groups (the first half of the vector holds the intensities).
    """
    model.net.eval()
    y, image, pers = model.output_tensor(features, requires_grad=True)
    y.backward()
    image_sal = image.grad[0].abs().numpy()
    pers_sal = pers.grad[0].abs().numpy()
    totals = {
        name: float(image_sal[c].sum()) for c, name in enumerate(IMAGE_CHANNEL_NAMES)
    }
    n_values = 5
    totals["intensity"] = float(pers_sal[:n_values].sum())
    totals["intensity_change"] = float(pers_sal[n_values:].sum())
    return SaliencyMap(
        image=image_sal, persistence=pers_sal, channel_totals=totals, time=features.valid_time
    )


def detrend_channel_saliency(series: np.ndarray) -> np.ndarray:
    """Remove the per-channel ordinary-least-squares linear fit in time.

    ``series`` is (T, C) with T >= 3; an affine series detrends to zeros.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 3:
        raise ValueError("need at least 3 time steps to remove a trend")
    t = np.arange(arr.shape[0], dtype=float)
    design = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(design, arr, rcond=None)
    return arr - design @ coef


# ---------------------------------------------------------------------------
# Channel-group Shapley attribution


@dataclass(frozen=True)
class ChannelGroup:
    """A named slice of the input: a mask over image channels (by channel
    index) or persistence entries (by position)."""

    name: str
    image_channels: tuple[int, ...] = ()
    persistence_indices: tuple[int, ...] = ()


def default_groups(n_persistence: int) -> list[ChannelGroup]:
    """Six image channels plus intensity and intensity-change groups."""
    groups = [ChannelGroup(name, image_channels=(c,)) for c, name in enumerate(IMAGE_CHANNEL_NAMES)]
    n_values = 5
    groups.append(ChannelGroup("intensity", persistence_indices=tuple(range(n_values))))
    groups.append(ChannelGroup("intensity_change", persistence_indices=tuple(range(n_values, n_persistence))))
    return groups


def observed_forecast_groups(n_persistence: int, n_forecast_rows: int) -> list[ChannelGroup]:
    """Quadrant channels split into observed-row and forecast-row blocks.

    Row masks cannot be expressed as whole-channel indices, so this grouping
    is expanded at evaluation time via the row split recorded in the name.
    """
    groups = []
    for c, name in enumerate(QUADRANT_ORDER):
        groups.append(ChannelGroup(f"{name}_observed", image_channels=(c,)))
        groups.append(ChannelGroup(f"{name}_forecast", image_channels=(c,)))
    groups.append(ChannelGroup("radius", image_channels=(4,)))
    groups.append(ChannelGroup("time", image_channels=(5,)))
    n_values = 5
    groups.append(ChannelGroup("intensity", persistence_indices=tuple(range(n_values))))
    groups.append(ChannelGroup("intensity_change", persistence_indices=tuple(range(n_values, n_persistence))))
    return groups


def baseline_from_model(model: NowcastModel, features: NowcastFeatures) -> NowcastFeatures:
    """Per-channel training means as the absent-channel baseline; coordinate
    channels keep their constant values."""
    image = np.empty_like(features.image)
    mean = model.net.image_mean.numpy().reshape(N_QUADRANTS)
    for q in range(N_QUADRANTS):
        image[q] = mean[q]
    image[N_QUADRANTS:] = coordinate_channels()
    pers = model.net.pers_mean.numpy().copy()
    return NowcastFeatures(image=image, persistence=pers, valid_time=features.valid_time)


@dataclass
class ShapleyAttribution:
    values: dict[str, float]
    efficiency_residual: float
    n_samples: int


def _blend(features: NowcastFeatures, baseline: NowcastFeatures,
           groups: Sequence[ChannelGroup], present: frozenset[int],
           forecast_row_start: int | None) -> NowcastFeatures:
    image = baseline.image.copy()
    pers = baseline.persistence.copy()
    for gi in present:
        g = groups[gi]
        for c in g.image_channels:
            if forecast_row_start is not None and g.name.endswith("_observed"):
                image[c, :forecast_row_start] = features.image[c, :forecast_row_start]
            elif forecast_row_start is not None and g.name.endswith("_forecast"):
                image[c, forecast_row_start:] = features.image[c, forecast_row_start:]
            else:
                image[c] = features.image[c]
        for i in g.persistence_indices:
            pers[i] = features.persistence[i]
    return NowcastFeatures(image=image, persistence=pers, valid_time=features.valid_time)


def channel_shapley(model: NowcastModel, features: NowcastFeatures,
                    baseline: NowcastFeatures | None = None,
                    n_samples: int = 64, rng: np.random.Generator | None = None,
                    groups: Sequence[ChannelGroup] | None = None,
                    exhaustive: bool = False,
                    forecast_row_start: int | None = None) -> ShapleyAttribution:
    """Shapley attribution of the unclamped model output over channel groups.

    Monte-Carlo over sampled permutations by default; ``exhaustive=True``
    enumerates all coalitions exactly (feasible up to ~8 groups), under which
    the attributions sum to Y(x) - Y(baseline) exactly.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if baseline is None:
        baseline = baseline_from_model(model, features)
    if groups is None:
        groups = default_groups(features.persistence.shape[0])
    n = len(groups)
    model.net.eval()

    cache: dict[frozenset[int], float] = {}

    def value(present: frozenset[int]) -> float:
        if present not in cache:
            blended = _blend(features, baseline, groups, present, forecast_row_start)
            with torch.no_grad():
                y, _, _ = model.output_tensor(blended)
            cache[present] = float(y.item())
        return cache[present]

    attributions = {g.name: 0.0 for g in groups}
    if exhaustive:
        # Exact Shapley by subset enumeration, equal to averaging over all
        # n! permutations.
        others = list(range(n))
        for gi, g in enumerate(groups):
            rest = [j for j in others if j != gi]
            total = 0.0
            for size in range(n):
                weight = math.factorial(size) * math.factorial(n - size - 1) / math.factorial(n)
                for subset in itertools.combinations(rest, size):
                    s = frozenset(subset)
                    total += weight * (value(s | {gi}) - value(s))
            attributions[g.name] = total
        n_used = math.factorial(n)
    else:
        rng = rng or np.random.default_rng(0)
        for _ in range(n_samples):
            order = rng.permutation(n)
            present: frozenset[int] = frozenset()
            for gi in order:
                before = value(present)
                present = present | {int(gi)}
                attributions[groups[gi].name] += value(present) - before
        for g in groups:
            attributions[g.name] /= n_samples
        n_used = n_samples

    residual = (value(frozenset(range(n))) - value(frozenset())) - sum(attributions.values())
    return ShapleyAttribution(values=attributions, efficiency_residual=residual, n_samples=n_used)


# ---------------------------------------------------------------------------
# Report output


def write_channel_table(rows: dict[str, float], path: str | os.PathLike,
                        value_name: str = "attribution") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", value_name])
        for name, v in rows.items():
            writer.writerow([name, repr(float(v))])


def save_saliency_figure(sal: SaliencyMap, path: str | os.PathLike) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 3, figsize=(12, 5), sharex=True, sharey=True)
    vmax = max(sal.image.max(), 1e-12)
    for c, (name, ax) in enumerate(zip(IMAGE_CHANNEL_NAMES, axes.ravel())):
        im = ax.imshow(sal.image[c], aspect="auto", cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(name)
    fig.colorbar(im, ax=axes.ravel().tolist(), label="|dY/dx|")
    fig.suptitle("gradient saliency by channel (time down, radius right)")
    fig.savefig(os.fspath(path), dpi=120)
    plt.close(fig)
