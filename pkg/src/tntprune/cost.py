"""Analytic MAC counts and measured throughput.

One multiply-accumulate is counted as one FLOP; softmax, LayerNorm, GELU
and residual adds are not counted.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .vit import ModelConfig, forward

# Published GFLOPs of the unpruned backbones.
REFERENCE_GFLOPS = {"deit-b-distil": 17.68, "deit-s-distil": 4.63, "vit16-768": 9.17}

PRESETS = {
    "deit-b-distil": ModelConfig(image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12,
                                 mlp_dim=3072, num_classes=1000, special_tokens=2),
    "deit-s-distil": ModelConfig(image_size=224, patch_size=16, channels=3, dim=384, depth=12, heads=6,
                                 mlp_dim=1536, num_classes=1000, special_tokens=2),
    "vit16-768": ModelConfig(image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12,
                             mlp_dim=768, num_classes=1000, special_tokens=1),
}


@dataclass
class LayerMacs:
    layer: int
    tokens: int
    qkv: int
    scores: int
    values: int
    proj: int
    mlp: int

    @property
    def total(self) -> int:
        return self.qkv + self.scores + self.values + self.proj + self.mlp


@dataclass
class FlopsReport:
    layers: list[LayerMacs]
    patch_embed: int
    head: int
    allocator: int = 0

    @property
    def total_macs(self) -> int:
        return sum(l.total for l in self.layers) + self.patch_embed + self.head + self.allocator

    @property
    def total_gflops(self) -> float:
        return self.total_macs / 1e9

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "tokens", "qkv", "scores", "values", "proj", "mlp", "total_macs"])
        for l in self.layers:
            w.writerow([l.layer, l.tokens, l.qkv, l.scores, l.values, l.proj, l.mlp, l.total])
        w.writerow(["patch_embed", "", "", "", "", "", "", self.patch_embed])
        w.writerow(["head", "", "", "", "", "", "", self.head])
        w.writerow(["allocator", "", "", "", "", "", "", self.allocator])
        w.writerow(["total", "", "", "", "", "", "", self.total_macs])
        return buf.getvalue()


def layer_macs(n: int, dim: int, mlp_dim: int, layer: int = 0) -> LayerMacs:
    return LayerMacs(
        layer=layer,
        tokens=n,
        qkv=3 * n * dim * dim,
        scores=n * n * dim,
        values=n * n * dim,
        proj=n * dim * dim,
        mlp=2 * n * dim * mlp_dim,
    )


def flops_estimate(
    config: ModelConfig,
    tokens_per_layer: Sequence[int],
    allocator_tokens: Sequence[int] = (),
    allocator_macs_per_token: int | None = None,
) -> FlopsReport:
    """MACs for a forward pass where block ``i`` sees ``tokens_per_layer[i]`` tokens.

    Counts include special tokens. ``allocator_tokens`` lists the live token
    count at each allocator-head evaluation (a linear head costs ``D`` MACs
    per token unless ``allocator_macs_per_token`` says otherwise).
    """
    if len(tokens_per_layer) != config.depth:
        raise ConfigError(f"tokens_per_layer has {len(tokens_per_layer)} entries, model depth is {config.depth}")
    if any(int(n) < 0 for n in tokens_per_layer):
        raise ConfigError("token counts must be nonnegative")
    D = config.dim
    layers = [layer_macs(int(n), D, config.mlp_dim, i) for i, n in enumerate(tokens_per_layer)]
    per_tok = D if allocator_macs_per_token is None else allocator_macs_per_token
    return FlopsReport(
        layers=layers,
        patch_embed=config.num_patches * D * config.patch_dim,
        head=D * config.num_classes,
        allocator=sum(int(n) * per_tok for n in allocator_tokens),
    )


def dense_profile(config: ModelConfig) -> list[int]:
    return [config.seq_len] * config.depth


@dataclass
class TimingReport:
    images_per_second: float
    batch: int
    warmup: int
    iters: int
    windows: list[float] = field(default_factory=list)


def time_callable(fn, n_images: int, batch: int, warmup: int = 1, iters: int = 5) -> TimingReport:
    """Median images/second over ``iters`` timed calls of ``fn()`` (each processing ``n_images``)."""
    if iters < 5:
        raise ConfigError("throughput needs at least 5 measurement windows")
    for _ in range(warmup):
        fn()
    windows = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        windows.append(n_images / (time.perf_counter() - t0))
    return TimingReport(statistics.median(windows), batch, warmup, iters, windows)


def throughput_measure(backbone, allocator, schedule, images: np.ndarray, batch: int, warmup: int = 1,
                       iters: int = 5) -> TimingReport:
    """Throughput of :func:`apply_schedule` (or the dense forward when ``schedule`` is None).

    Pruned tokens are physically removed from the sequence, so timings
    reflect the shorter attention and MLP inputs.
    """
    from .pruning import apply_schedule

    images = np.asarray(images[:batch])

    if schedule is None:
        def run():
            with T.no_grad():
                forward(images, backbone, backbone.config)
    else:
        def run():
            apply_schedule(backbone, allocator, images, schedule)

    return time_callable(run, len(images), batch, warmup, iters)
