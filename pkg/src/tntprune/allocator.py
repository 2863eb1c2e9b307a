"""Noise allocator: per-layer relevance heads trained by budgeted noise injection.

During training, after every noised block the patch tokens receive Gaussian
noise scaled per token by ``beta * (1 - alpha_i)``, where ``alpha`` is a
softmax over the tokens of a small head's scores. Because the alphas sum to
one, the network cannot switch the noise off everywhere; it learns to spend
the low-noise budget on the tokens the frozen backbone needs. At inference
the alphas rank tokens for pruning and no noise is added.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, DomainError, TrainingError, UsageError
from .optim import Adam
from .rng import RngStream
from .tensor import Tensor
from .vit import ModelConfig, ModelParams, TokenBatch, forward, iterate_minibatches, patch_embed, block_forward

DEFAULT_BETA = 0.02
DEFAULT_ALLOCATOR_EPOCHS = 40
# The reference implementation noises the outputs of blocks 0..4.
DEFAULT_NOISED_LAYERS = (0, 1, 2, 3, 4)


@dataclass
class Head:
    """Linear ``D -> 1`` head, or ``D -> hidden -> 1`` with GELU when ``kind == "mlp"``."""

    kind: str
    tensors: dict[str, Tensor]

    def __call__(self, x: Tensor, output_bias: bool = True) -> Tensor:
        """Per-token logits ``[..., N]``.

        ``output_bias=False`` omits the final bias, which adds the same constant
        to every token and so cancels in the softmax over tokens.
        """
        t = self.tensors
        if self.kind == "linear":
            out = T.linear(x, t["weight"], t["bias"] if output_bias else None)
        else:
            h = T.gelu(T.linear(x, t["fc1.weight"], t["fc1.bias"]))
            out = T.linear(h, t["fc2.weight"], t["fc2.bias"] if output_bias else None)
        return T.reshape(out, out.shape[:-1])

    def macs_per_token(self) -> int:
        t = self.tensors
        if self.kind == "linear":
            return t["weight"].shape[0]
        d, h = t["fc1.weight"].shape
        return d * h + h


class AllocatorParams:
    def __init__(self, heads: dict[int, Head], norm_gamma: Tensor, norm_shift: Tensor):
        if not heads:
            raise ConfigError("allocator needs at least one head")
        self.heads = dict(sorted(heads.items()))
        self.norm_gamma = norm_gamma
        self.norm_shift = norm_shift

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(self.heads)

    @property
    def kind(self) -> str:
        return next(iter(self.heads.values())).kind

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for layer, head in self.heads.items():
            for name, t in head.tensors.items():
                out[f"alloc.layer{layer}.{name}"] = t
        out["alloc.norm.gamma"] = self.norm_gamma
        out["alloc.norm.shift"] = self.norm_shift
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def copy(self) -> AllocatorParams:
        return AllocatorParams.from_arrays({k: v.data.copy() for k, v in self.named_tensors().items()})

    def save(self, path) -> None:
        checkpoint.save(path, {k: v.data for k, v in self.named_tensors().items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> AllocatorParams:
        heads: dict[int, dict[str, Tensor]] = {}
        gamma = shift = None
        for name, arr in arrays.items():
            if name == "alloc.norm.gamma":
                gamma = Tensor(arr)
            elif name == "alloc.norm.shift":
                shift = Tensor(arr)
            elif name.startswith("alloc.layer"):
                layer_s, _, leaf = name[len("alloc.layer"):].partition(".")
                heads.setdefault(int(layer_s), {})[leaf] = Tensor(arr)
            else:
                raise ConfigError(f"unexpected tensor {name!r} in allocator checkpoint")
        if gamma is None or shift is None:
            raise ConfigError("allocator checkpoint lacks alloc.norm tensors")
        built = {}
        for layer, tensors in heads.items():
            kind = "linear" if set(tensors) == {"weight", "bias"} else "mlp"
            if kind == "mlp" and set(tensors) != {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}:
                raise ConfigError(f"allocator head {layer} has unexpected tensors {sorted(tensors)}")
            built[layer] = Head(kind, tensors)
        return cls(built, gamma, shift)

    @classmethod
    def load(cls, path) -> AllocatorParams:
        return cls.from_arrays(checkpoint.load(path))

    def check_compatible(self, config: ModelConfig) -> None:
        D = config.dim
        if self.norm_gamma.shape != (D,):
            raise ConfigError(f"allocator width {self.norm_gamma.shape} does not match model dim {D}")
        for layer in self.heads:
            if not 0 <= layer < config.depth:
                raise ConfigError(f"allocator head at layer {layer} outside model depth {config.depth}")


def init_allocator(
    config: ModelConfig,
    layers,
    rng: RngStream,
    kind: str = "linear",
    hidden: int | None = None,
) -> AllocatorParams:
    """Heads ~ N(0, 0.02²) with zero bias; ``alpha_norm`` starts as the identity LayerNorm."""
    if kind not in ("linear", "mlp"):
        raise ConfigError(f"head kind must be 'linear' or 'mlp', got {kind!r}")
    D = config.dim
    hidden = hidden or max(1, D // 2)
    heads = {}
    for layer in sorted(set(int(l) for l in layers)):
        r = rng.fork(layer)
        if kind == "linear":
            tensors = {"weight": Tensor(0.02 * r.standard_normal((D, 1))), "bias": Tensor(np.zeros(1))}
        else:
            tensors = {
                "fc1.weight": Tensor(0.02 * r.standard_normal((D, hidden))),
                "fc1.bias": Tensor(np.zeros(hidden)),
                "fc2.weight": Tensor(0.02 * r.standard_normal((hidden, 1))),
                "fc2.bias": Tensor(np.zeros(1)),
            }
        heads[layer] = Head(kind, tensors)
    alloc = AllocatorParams(heads, Tensor(np.ones(D)), Tensor(np.zeros(D)))
    alloc.check_compatible(config)
    return alloc


@dataclass
class NoiseConfig:
    beta: float = DEFAULT_BETA
    noised_layers: tuple[int, ...] = DEFAULT_NOISED_LAYERS
    rng: RngStream = field(default_factory=lambda: RngStream(0, 0x4015E))

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        self.noised_layers = tuple(sorted(set(int(l) for l in self.noised_layers)))

    def validate(self, config: ModelConfig) -> None:
        bad = [l for l in self.noised_layers if not 0 <= l < config.depth]
        if bad:
            raise ConfigError(f"noised layers {bad} outside [0, {config.depth})")


def default_noised_layers(depth: int) -> tuple[int, ...]:
    return tuple(l for l in DEFAULT_NOISED_LAYERS if l < depth)


def compute_alpha(x: TokenBatch, head: Head) -> Tensor:
    """Softmax over live patch tokens of the head's per-token score; ``[B, N_live]``.

    The head's output bias is left out: it shifts every score equally, so
    dropping it makes the cancellation exact instead of exact-up-to-rounding.
    """
    if x.num_live < 1:
        raise DomainError("compute_alpha needs at least one live patch token")
    return T.softmax(head(x.patch_tokens(), output_bias=False), axis=-1)


def noise_term(alpha: Tensor, eps: np.ndarray, special: int) -> Tensor:
    """``(1 - alpha_i) * eps_i`` for patch rows, exact zeros for special rows."""
    scale = T.add(1.0, T.neg(alpha))
    B, N = alpha.shape
    patch_noise = T.mul(T.reshape(scale, (B, N, 1)), Tensor(eps))
    if special == 0:
        return patch_noise
    zeros = Tensor(np.zeros((B, special, eps.shape[-1])))
    return T.concat([zeros, patch_noise], axis=1)


def inject_training_noise(
    x: TokenBatch,
    alpha: Tensor,
    params: AllocatorParams,
    cfg: NoiseConfig,
    training: bool = True,
    eps: np.ndarray | None = None,
    eps_layernorm: float = 1e-6,
) -> TokenBatch:
    """``alpha_norm(x) + beta * (1 - alpha) * eps`` with ``eps ~ N(0, I)`` per patch row.

    ``eps`` may be supplied to hold the noise fixed (gradient checks);
    otherwise it is drawn from ``cfg.rng``.
    """
    if not training:
        raise UsageError("inject_training_noise is training-only; inference never adds noise")
    if eps is None:
        eps = cfg.rng.standard_normal((x.batch, x.num_live, x.activations.shape[-1]))
    normed = T.layer_norm(x.activations, params.norm_gamma, params.norm_shift, eps_layernorm)
    if cfg.beta == 0:
        return x.replace(normed)
    noise = noise_term(alpha, eps, x.special_tokens)
    return x.replace(T.add(normed, T.scale(noise, cfg.beta)))


def noised_forward(
    images: np.ndarray,
    backbone: ModelParams,
    allocator: AllocatorParams,
    cfg: NoiseConfig,
    fixed_eps: dict[int, np.ndarray] | None = None,
):
    """Training-mode forward; returns ``(logits, {layer: alpha})``."""
    config = backbone.config
    alphas: dict[int, Tensor] = {}
    noised = set(cfg.noised_layers)

    def hook(i: int, x: TokenBatch) -> TokenBatch:
        if i not in noised:
            return x
        if i not in allocator.heads:
            raise ConfigError(f"noised layer {i} has no allocator head")
        alpha = compute_alpha(x, allocator.heads[i])
        alphas[i] = alpha
        eps = None if fixed_eps is None else fixed_eps[i]
        return inject_training_noise(x, alpha, allocator, cfg, eps=eps, eps_layernorm=config.layernorm_eps)

    res = forward(images, backbone, config, hook=hook)
    return res.logits, alphas


@dataclass
class AllocatorHyper:
    lr: float = 1e-2
    epochs: int = DEFAULT_ALLOCATOR_EPOCHS
    batch: int = 64
    seed: int = 0


@dataclass
class AllocatorEpochLog:
    epoch: int
    loss: float
    accuracy: float


def train_allocator(
    backbone: ModelParams,
    allocator: AllocatorParams,
    dataset,
    cfg: NoiseConfig,
    hyper: AllocatorHyper,
):
    """Minimise cross-entropy of the noised forward pass over allocator weights only (Adam).

    The backbone is never written to. Returns ``(allocator, log)``.
    """
    config = backbone.config
    if not cfg.noised_layers:
        raise ConfigError("noised_layers must be nonempty")
    cfg.validate(config)
    allocator.check_compatible(config)
    missing = [l for l in cfg.noised_layers if l not in allocator.heads]
    if missing:
        raise ConfigError(f"no allocator head for noised layers {missing}")
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels).astype(np.int64)
    if len(images) == 0:
        raise TrainingError("dataset is empty")

    root = RngStream(hyper.seed, stream_id=0xA110C)
    cfg.rng = root.fork(2)
    backbone.set_trainable(False)
    allocator.set_trainable(True)
    opt = Adam(allocator.parameters(), lr=hyper.lr)
    log: list[AllocatorEpochLog] = []
    try:
        for epoch in range(hyper.epochs):
            total, correct, seen = 0.0, 0, 0
            for idx in iterate_minibatches(len(images), hyper.batch, root.fork(1, epoch)):
                logits, _ = noised_forward(images[idx], backbone, allocator, cfg)
                loss = T.cross_entropy(logits, labels[idx])
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"allocator loss diverged (non-finite) in epoch {epoch}")
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
                seen += len(idx)
            log.append(AllocatorEpochLog(epoch, total / seen, correct / seen))
    finally:
        allocator.set_trainable(False)
    return allocator, log


def collect_alpha(backbone: ModelParams, allocator: AllocatorParams, images, layer: int) -> np.ndarray:
    """Inference-mode alphas at ``layer`` (no noise, no ``alpha_norm``); ``[B, N]``."""
    if layer not in allocator.heads:
        raise UsageError(f"layer {layer} has no allocator head (configured: {list(allocator.heads)})")
    config = backbone.config
    with T.no_grad():
        x = patch_embed(images, backbone, config)
        for i in range(layer + 1):
            x, _ = block_forward(x, backbone.block(i), config)
        return compute_alpha(x, allocator.heads[layer]).data


def relevance_auc(alpha: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-image ROC AUC of ``alpha`` as a detector of ``mask`` (both ``[B, N]``).

    Alphas are a softmax within each image, so ranks are only compared
    inside an image. Ties count one half. Images whose mask is all-true or
    all-false have no AUC and are skipped.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if alpha.shape != mask.shape or alpha.ndim != 2:
        raise DomainError(f"alpha {alpha.shape} and mask {mask.shape} must be matching [B, N] arrays")
    aucs = []
    for a, m in zip(alpha, mask):
        pos, neg = int(m.sum()), int((~m).sum())
        if pos == 0 or neg == 0:
            continue
        ranks = rankdata(a)
        aucs.append((ranks[m].sum() - pos * (pos + 1) / 2) / (pos * neg))
    if not aucs:
        raise DomainError("no image has both informative and uninformative tokens")
    return float(np.mean(aucs))


def snr_capacity(p_signal: float, p_noise: float) -> float:
    """Channel-capacity bound ``log2(1 + P_signal / P_noise)`` in bits."""
    if p_noise <= 0:
        raise DomainError("p_noise must be positive")
    if p_signal < 0:
        raise DomainError("p_signal must be nonnegative")
    return math.log2(1.0 + p_signal / p_noise)
