"""A small pre-norm vision transformer used as the frozen backbone."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, ShapeError, TrainingError
from .optim import SGD
from .rng import RngStream
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 2
    special_tokens: int = 1
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.special_tokens not in (0, 1, 2):
            raise ConfigError("special_tokens must be 0 (mean pooling), 1 (CLS) or 2 (CLS+distil)")
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.layernorm_eps <= 0:
            raise ConfigError("layernorm_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.special_tokens

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, M = cfg.dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (cfg.patch_dim, D),
        "patch.bias": (D,),
        "pos_embed": (cfg.seq_len, D),
    }
    if cfg.special_tokens >= 1:
        shapes["cls_token"] = (1, D)
    if cfg.special_tokens == 2:
        shapes["dist_token"] = (1, D)
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.gamma": (D,), b + "ln1.shift": (D,),
            b + "attn.qkv.weight": (D, 3 * D), b + "attn.qkv.bias": (3 * D,),
            b + "attn.proj.weight": (D, D), b + "attn.proj.bias": (D,),
            b + "ln2.gamma": (D,), b + "ln2.shift": (D,),
            b + "mlp.fc1.weight": (D, M), b + "mlp.fc1.bias": (M,),
            b + "mlp.fc2.weight": (M, D), b + "mlp.fc2.bias": (D,),
        })
    shapes.update({
        "norm.gamma": (D,), "norm.shift": (D,),
        "head.weight": (D, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


class ModelParams:
    """Named parameter tensors for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {tensors[name].shape} does not match config {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def block(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def save(self, path) -> None:
        checkpoint.save(path, self.arrays())

    @classmethod
    def load(cls, path, config: ModelConfig) -> ModelParams:
        arrays = checkpoint.load(path)
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})


def init_params(cfg: ModelConfig, rng: RngStream) -> ModelParams:
    """Weights ~ N(0, 1/fan_in), biases and shifts zero, norm gains one, embeddings ~ N(0, 0.02²)."""
    out: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "shift"):
            arr = np.zeros(shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "weight":
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            arr = 0.02 * rng.standard_normal(shape)
        out[name] = Tensor(arr)
    return ModelParams(cfg, out)


@dataclass
class TokenBatch:
    """Activations ``[B, special + live, D]`` plus the original patch index of every live row."""

    activations: Tensor
    special_tokens: int
    live_indices: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.live_indices = np.asarray(self.live_indices, dtype=np.int64)
        B = self.activations.shape[0]
        if self.sample_ids is None:
            self.sample_ids = np.arange(B, dtype=np.int64)
        if self.live_indices.shape != (B, self.activations.shape[1] - self.special_tokens):
            raise ShapeError(
                f"live_indices shape {self.live_indices.shape} does not match activations {self.activations.shape}"
            )

    @property
    def batch(self) -> int:
        return self.activations.shape[0]

    @property
    def num_live(self) -> int:
        return self.live_indices.shape[1]

    @property
    def seq_len(self) -> int:
        return self.activations.shape[1]

    def patch_tokens(self) -> Tensor:
        return self.activations[:, self.special_tokens:, :]

    def replace(self, activations: Tensor, live_indices: np.ndarray | None = None) -> TokenBatch:
        return TokenBatch(
            activations,
            self.special_tokens,
            self.live_indices if live_indices is None else live_indices,
            self.sample_ids,
        )

    def keep(self, positions: np.ndarray) -> TokenBatch:
        """Keep the live rows at ``positions`` (``[B, k]``, indices into the live axis).

        Rows keep their relative order; special tokens are always retained.
        """
        positions = np.sort(np.asarray(positions, dtype=np.int64), axis=1)
        S = self.special_tokens
        B = self.batch
        rows = np.concatenate([np.broadcast_to(np.arange(S), (B, S)), positions + S], axis=1)
        acts = T.take_rows(self.activations, rows)
        live = np.take_along_axis(self.live_indices, positions, axis=1)
        return TokenBatch(acts, S, live, self.sample_ids)


# AttentionRecord: per sample, the CLS row of the head-averaged attention
# matrix, shape [B, seq_len]; None for mean-pooled models.
AttentionRecord = np.ndarray


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W] -> [B, N, patch*patch*C]`` with patches in row-major grid order."""
    B, C, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, C, g_h, patch, g_w, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, g_h * g_w, patch * patch * C)


def patch_embed(images, params: ModelParams, config: ModelConfig, sample_ids=None) -> TokenBatch:
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    expect = (config.channels, config.image_size, config.image_size)
    if imgs.ndim != 4 or imgs.shape[1:] != expect:
        raise ConfigError(f"images shape {imgs.shape} does not match config [B, {expect[0]}, {expect[1]}, {expect[2]}]")
    B = imgs.shape[0]
    patches = Tensor(patchify(imgs, config.patch_size))
    x = T.linear(patches, params["patch.weight"], params["patch.bias"])
    specials = []
    if config.special_tokens >= 1:
        specials.append(params["cls_token"])
    if config.special_tokens == 2:
        specials.append(params["dist_token"])
    if specials:
        prefix = T.concat(specials, axis=0)
        prefix = T.add(Tensor(np.zeros((B, 1, 1))), T.reshape(prefix, (1, config.special_tokens, config.dim)))
        x = T.concat([prefix, x], axis=1)
    x = T.add(x, params["pos_embed"])
    live = np.broadcast_to(np.arange(config.num_patches), (B, config.num_patches)).copy()
    return TokenBatch(x, config.special_tokens, live, sample_ids)


def attention(x: Tensor, p: dict[str, Tensor], heads: int, want_attention: bool, special: int):
    B, n, D = x.shape
    dh = D // heads
    qkv = T.linear(x, p["attn.qkv.weight"], p["attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, n, D))
    out = T.linear(out, p["attn.proj.weight"], p["attn.proj.bias"])
    record = attn.data[:, :, 0, :].mean(axis=1) if want_attention and special >= 1 else None
    return out, record


def block_forward(x: TokenBatch, p: dict[str, Tensor], config: ModelConfig, want_attention: bool = False):
    """Pre-norm residual block: ``x + MHA(LN(x))`` then ``+ MLP(LN(.))``."""
    eps = config.layernorm_eps
    a = x.activations
    h = T.layer_norm(a, p["ln1.gamma"], p["ln1.shift"], eps)
    att, record = attention(h, p, config.heads, want_attention, x.special_tokens)
    a = T.add(a, att)
    h = T.layer_norm(a, p["ln2.gamma"], p["ln2.shift"], eps)
    h = T.gelu(T.linear(h, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    a = T.add(a, T.linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"]))
    return x.replace(a), record


def classify(x: TokenBatch, params: ModelParams, config: ModelConfig) -> Tensor:
    a = T.layer_norm(x.activations, params["norm.gamma"], params["norm.shift"], config.layernorm_eps)
    if config.special_tokens >= 1:
        pooled = a[:, 0, :]
    else:
        pooled = T.mean(a, axis=1)
    return T.linear(pooled, params["head.weight"], params["head.bias"])


# hook(block_index, tokens_after_block) -> tokens fed to the next block
BlockHook = Callable[[int, TokenBatch], TokenBatch]


@dataclass
class ForwardResult:
    logits: Tensor
    snapshots: list[TokenBatch]
    attention: list[AttentionRecord | None]


def forward(
    images,
    params: ModelParams,
    config: ModelConfig,
    want_attention: bool = False,
    hook: BlockHook | None = None,
    *,
    start: TokenBatch | None = None,
    sample_ids=None,
) -> ForwardResult:
    """Full pass. ``snapshots[i]`` is the output of block ``i`` before ``hook`` sees it."""
    x = start if start is not None else patch_embed(images, params, config, sample_ids)
    snaps: list[TokenBatch] = []
    records: list[AttentionRecord | None] = []
    for i in range(config.depth):
        x, rec = block_forward(x, params.block(i), config, want_attention)
        snaps.append(x)
        records.append(rec)
        if hook is not None:
            x = hook(i, x)
    return ForwardResult(classify(x, params, config), snaps, records)


def predict(images: np.ndarray, params: ModelParams, config: ModelConfig, batch: int = 256, hook=None) -> np.ndarray:
    preds = []
    with T.no_grad():
        for lo in range(0, len(images), batch):
            logits = forward(images[lo : lo + batch], params, config, hook=hook).logits.data
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class TrainHyper:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 64
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


def iterate_minibatches(n: int, batch: int, rng: RngStream):
    order = rng.permutation(n)
    for lo in range(0, n, batch):
        yield order[lo : lo + batch]


def train_backbone(dataset, config: ModelConfig, hyper: TrainHyper, params: ModelParams | None = None):
    """Cross-entropy training with SGD + momentum. Returns ``(params, log)``.

    ``dataset`` needs ``images`` ``[M, C, H, W]`` and integer ``labels``.
    Deterministic given ``hyper.seed``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels).astype(np.int64)
    if len(images) == 0:
        raise TrainingError("dataset is empty")
    root = RngStream(hyper.seed, stream_id=0x7B)
    if params is None:
        params = init_params(config, root.fork(0))
    params.set_trainable(True)
    opt = SGD(list(params), lr=hyper.lr, momentum=hyper.momentum)
    log: list[EpochLog] = []
    try:
        for epoch in range(hyper.epochs):
            total, correct, seen = 0.0, 0, 0
            for idx in iterate_minibatches(len(images), hyper.batch, root.fork(1, epoch)):
                logits = forward(images[idx], params, config).logits
                loss = T.cross_entropy(logits, labels[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
                seen += len(idx)
            log.append(EpochLog(epoch, total / seen, correct / seen))
    finally:
        params.set_trainable(False)
    return params, log
