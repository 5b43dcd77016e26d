"""Reconstruction-attack harness.

An attacker trains a decoder from uploaded representations back to raw
images; held-out mean squared error proxies privacy leakage (higher MSE =
less leakage).  The attacker sees representations only, never the masks or
allocations that produced them.  For mixed representations the target is
the first contributing client's raw image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .mixing import generate_mask_set, keep_count, sample_mixing_counts
from .model import ClientSegment, ModelConfig, extract_patches
from .optim import AdamW
from .rng import stream_generator
from .tensor import Tensor, add, backward, gelu, matmul, mean, mul, scale, transpose

STREAM_ATTACK = 8

REPRESENTATIONS = ("smashed", "cutsmashed", "mixup", "patch_cutmix", "shuffled_cutmix")


@dataclass
class AttackConfig:
    representation: str = "smashed"
    train_fraction: float = 0.1
    decoder_width: int = 256
    decoder_depth: int = 1
    epochs: int = 120
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    normalize_inputs: bool = True  # per-sample feature standardization
    seed: int = 0
    keep_ratio: float | None = None  # cutsmashed rows kept; None = protocol's 2-way draw
    mixup_lam: float = 0.5
    cutmix_alpha: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractError(
                f"train_fraction must lie in (0, 1], got {self.train_fraction}")


@dataclass
class AttackReport:
    representation: str
    test_mse: float
    sample_count: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Snapshot:
    """Frozen trained client segment plus the data it embeds."""

    client_segment: ClientSegment
    dataset: "object"  # data.Dataset
    model_config: ModelConfig


def smashed_values(segment: ClientSegment, images: np.ndarray,
                   config: ModelConfig) -> np.ndarray:
    """Plain-array client forward for frozen segments (no graph recorded)."""
    patches = extract_patches(images, config)
    flat = patches.reshape(-1, config.patch_pixels)
    tokens = flat @ segment.patch_weight.values.T + segment.patch_bias.values
    tokens = tokens.reshape(images.shape[0], config.tokens, config.embed_dim)
    return (tokens + segment.pos_embed.values).astype(np.float32)


def build_representation(name: str, snapshot: Snapshot, config: AttackConfig,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (features, targets): one row per sample, targets are raw pixels."""
    dataset = snapshot.dataset
    mc = snapshot.model_config
    n = len(dataset)
    targets = dataset.images.reshape(n, -1).astype(np.float32)
    if name == "raw":
        return targets.copy(), targets
    smashed = smashed_values(snapshot.client_segment, dataset.images, mc)
    tokens = mc.tokens
    if name == "smashed":
        feats = smashed
    elif name == "cutsmashed":
        # One client's upload under the 2-way protocol: the kept-row count
        # follows the same Dirichlet draw unless a fixed ratio is forced.
        feats = smashed.copy()
        for i in range(n):
            if config.keep_ratio is None:
                kept = int(sample_mixing_counts(2, config.cutmix_alpha, tokens, rng)[0])
            else:
                kept = keep_count(config.keep_ratio, tokens)
            mask = np.zeros(tokens, dtype=bool)
            mask[rng.permutation(tokens)[:kept]] = True
            feats[i, ~mask, :] = 0.0
    elif name in ("mixup", "patch_cutmix", "shuffled_cutmix"):
        # Pair each sample with a distinct partner via a random cyclic order.
        order = rng.permutation(n)
        pair = np.empty(n, dtype=np.int64)
        pair[order] = order[np.arange(n) - 1]
        feats = np.empty_like(smashed)
        if name == "mixup":
            lam = np.float32(config.mixup_lam)
            feats = lam * smashed + (np.float32(1.0) - lam) * smashed[pair]
        else:
            for i in range(n):
                counts = sample_mixing_counts(2, config.cutmix_alpha, tokens, rng)
                masks = generate_mask_set(counts, tokens, rng)
                feats[i] = (smashed[i] * masks[0][:, None]
                            + smashed[pair[i]] * masks[1][:, None])
                if name == "shuffled_cutmix":
                    feats[i] = feats[i][rng.permutation(tokens)]
    else:
        raise ContractError(f"unknown representation {name!r}")
    return feats.reshape(n, -1).astype(np.float32), targets


class _Decoder:
    """MLP regressor: features -> hidden (gelu) x depth -> pixels."""

    def __init__(self, in_dim: int, out_dim: int, width: int, depth: int,
                 gen: np.random.Generator):
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        dims = [in_dim] + [width] * depth + [out_dim]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            std = 1.0 / math.sqrt(fan_in)
            w = gen.normal(0.0, std, size=(fan_out, fan_in)).astype(np.float32)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=np.float32),
                                      requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"w{i}"] = w
            named[f"b{i}"] = b
        return named

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, transpose(w)), b)
            if i != last:
                h = gelu(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.values.T + b.values
            if i != last:
                inner = math.sqrt(2.0 / math.pi) * (h + 0.044715 * h ** 3)
                h = 0.5 * h * (1.0 + np.tanh(inner))
        return h


def run_attack(config: AttackConfig, snapshot: Snapshot) -> AttackReport:
    """Train the decoder on a fraction of samples; report held-out MSE."""
    rng_build = stream_generator(config.seed, STREAM_ATTACK, 0)
    features, targets = build_representation(config.representation, snapshot,
                                             config, rng_build)
    if config.normalize_inputs:
        mu = features.mean(axis=1, keepdims=True)
        sd = features.std(axis=1, keepdims=True) + np.float32(1e-6)
        features = (features - mu) / sd
    n = features.shape[0]
    if n < 4:
        raise ContractError("attack needs at least 4 samples")
    split_rng = stream_generator(config.seed, STREAM_ATTACK, 1)
    order = split_rng.permutation(n)
    test_count = max(1, n // 5)
    test_idx, pool_idx = order[:test_count], order[test_count:]
    used = max(1, int(round(config.train_fraction * pool_idx.size)))
    train_idx = pool_idx[:used]

    gen = stream_generator(config.seed, STREAM_ATTACK, 2)
    decoder = _Decoder(features.shape[1], targets.shape[1], config.decoder_width,
                       config.decoder_depth, gen)
    opt = AdamW(decoder.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    x_train, y_train = features[train_idx], targets[train_idx]
    for _ in range(config.epochs):
        order = gen.permutation(train_idx.size)
        for start in range(0, train_idx.size, config.batch_size):
            take = order[start:start + config.batch_size]
            pred = decoder.forward(Tensor(x_train[take]))
            diff = add(pred, scale(Tensor(y_train[take]), -1.0))
            loss = mean(mul(diff, diff))
            backward(loss)
            opt.step()
            opt.zero_grads()

    pred = decoder.predict(features[test_idx])
    test_mse = float(np.mean((pred - targets[test_idx]) ** 2))
    return AttackReport(representation=config.representation, test_mse=test_mse,
                        sample_count=int(train_idx.size), config=asdict(config))
