"""Split vision transformer: client embedding segment and server block stack.

The client holds only the patch-embedding layer (linear patch projection,
bias, learnable positional table) and emits one token grid per image.  The
server holds the class token, the pre-norm transformer blocks, the final
norm, and the classifier head.  Keeping the class token server-side means
masks and mixing always operate over exactly the patch-token rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, IngestionError
from .tensor import (Tensor, add, concat, expand_batch, gelu, layer_norm,
                     matmul, reshape, scale, slice_rows, softmax, transpose)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} is not a multiple of heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        """Patch-token count M = (image_size / patch_size)^2."""
        return self.grid * self.grid

    @property
    def patch_pixels(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


# Paper-shaped defaults and a desk-scale profile that trains in minutes.
PROFILES = {
    "paper": ModelConfig(image_size=32, patch_size=8, channels=3, embed_dim=192,
                         depth=6, heads=3, num_classes=10),
    "desk": ModelConfig(image_size=16, patch_size=4, channels=3, embed_dim=32,
                        depth=2, heads=2, num_classes=10),
}


@dataclass
class ClientSegment:
    """Patch embedding: weight (embed_dim, patch_pixels), bias, positional table."""

    patch_weight: Tensor
    patch_bias: Tensor
    pos_embed: Tensor

    def parameters(self) -> dict[str, Tensor]:
        return {"patch_weight": self.patch_weight, "patch_bias": self.patch_bias,
                "pos_embed": self.pos_embed}


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor


@dataclass
class ServerSegment:
    """Class token, transformer blocks, final norm, classifier head."""

    blocks: list[BlockParams]
    class_token: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor

    def parameters(self) -> dict[str, Tensor]:
        named = {"class_token": self.class_token, "norm_gain": self.norm_gain,
                 "norm_bias": self.norm_bias, "head_weight": self.head_weight,
                 "head_bias": self.head_bias}
        for i, blk in enumerate(self.blocks):
            for key, value in vars(blk).items():
                named[f"block{i}.{key}"] = value
        return named


def _truncated_normal(gen: np.random.Generator, shape, std: float = 0.02,
                      bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) with |z| > bound resampled."""
    out = gen.normal(0.0, 1.0, size=shape)
    while True:
        over = np.abs(out) > bound
        if not over.any():
            break
        out[over] = gen.normal(0.0, 1.0, size=int(over.sum()))
    return (out * std).astype(np.float32)


def init_parameters(config: ModelConfig, seed: int) -> tuple[ClientSegment, ServerSegment]:
    """Deterministic init: trunc-normal(0.02) weights, zero biases and positions.

    Draw order is fixed (client patch weight, then per-block q/k/v/out/fc1/fc2,
    class token, head) so the same seed always yields the same parameters.
    """
    from .rng import STREAM_INIT, stream_generator

    gen = stream_generator(seed, STREAM_INIT)
    d, p = config.embed_dim, config.patch_pixels

    def weight(*shape):
        return Tensor(_truncated_normal(gen, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    client = ClientSegment(patch_weight=weight(d, p), patch_bias=zeros(d),
                           pos_embed=zeros(config.tokens, d))
    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockParams(
            ln1_gain=ones(d), ln1_bias=zeros(d),
            q_weight=weight(d, d), q_bias=zeros(d),
            k_weight=weight(d, d), k_bias=zeros(d),
            v_weight=weight(d, d), v_bias=zeros(d),
            out_weight=weight(d, d), out_bias=zeros(d),
            ln2_gain=ones(d), ln2_bias=zeros(d),
            fc1_weight=weight(config.mlp_dim, d), fc1_bias=zeros(config.mlp_dim),
            fc2_weight=weight(d, config.mlp_dim), fc2_bias=zeros(d),
        ))
    server = ServerSegment(blocks=blocks, class_token=weight(1, d),
                           norm_gain=ones(d), norm_bias=zeros(d),
                           head_weight=weight(config.num_classes, d),
                           head_bias=zeros(config.num_classes))
    return client, server


def extract_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, M, C*p*p); patch index is row-major over the grid,
    pixels within a patch are channel-major."""
    if images.ndim != 4:
        raise DimensionError(f"images must be (batch, C, H, W), got {images.shape}")
    b, c, h, w = images.shape
    if (c, h, w) != (config.channels, config.image_size, config.image_size):
        raise DimensionError(
            f"images {images.shape[1:]} do not match config "
            f"({config.channels}, {config.image_size}, {config.image_size})")
    g, p = config.grid, config.patch_size
    patches = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(patches.reshape(b, config.tokens, config.patch_pixels),
                                dtype=np.float32)


def client_forward(segment: ClientSegment, images: np.ndarray,
                   config: ModelConfig) -> Tensor:
    """Per-patch flatten -> linear embed -> add positional table; no class token."""
    patches = extract_patches(images, config)
    b = patches.shape[0]
    flat = Tensor(patches.reshape(b * config.tokens, config.patch_pixels))
    embedded = add(matmul(flat, transpose(segment.patch_weight)), segment.patch_bias)
    tokens = reshape(embedded, (b, config.tokens, config.embed_dim))
    return add(tokens, segment.pos_embed)


def _linear(x: Tensor, weight: Tensor, bias: Tensor, batch: int, rows: int) -> Tensor:
    """Apply a (out, in) weight to (batch, rows, in) tokens."""
    in_dim = weight.shape[1]
    out_dim = weight.shape[0]
    flat = reshape(x, (batch * rows, in_dim))
    y = add(matmul(flat, transpose(weight)), bias)
    return reshape(y, (batch, rows, out_dim))


def _split_heads(x: Tensor, batch: int, rows: int, heads: int, head_dim: int) -> Tensor:
    return transpose(reshape(x, (batch, rows, heads, head_dim)), (0, 2, 1, 3))


def _attention(x: Tensor, blk: BlockParams, config: ModelConfig, batch: int,
               rows: int) -> Tensor:
    d = config.embed_dim
    heads = config.heads
    head_dim = d // heads
    q = _split_heads(_linear(x, blk.q_weight, blk.q_bias, batch, rows), batch, rows, heads, head_dim)
    k = _split_heads(_linear(x, blk.k_weight, blk.k_bias, batch, rows), batch, rows, heads, head_dim)
    v = _split_heads(_linear(x, blk.v_weight, blk.v_bias, batch, rows), batch, rows, heads, head_dim)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    context = matmul(weights, v)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, rows, d))
    return _linear(merged, blk.out_weight, blk.out_bias, batch, rows)


def server_forward(segment: ServerSegment, tokens: Tensor,
                   config: ModelConfig) -> Tensor:
    """Prepend class token, run pre-norm blocks, norm the class row, apply head."""
    if tokens.ndim != 3 or tokens.shape[1] != config.tokens or tokens.shape[2] != config.embed_dim:
        raise DimensionError(
            f"tokens must be (batch, {config.tokens}, {config.embed_dim}), got {tokens.shape}")
    batch = tokens.shape[0]
    rows = config.tokens + 1
    cls = expand_batch(segment.class_token, batch)
    x = concat([cls, tokens], axis=1)
    for blk in segment.blocks:
        attended = _attention(layer_norm(x, blk.ln1_gain, blk.ln1_bias), blk, config, batch, rows)
        x = add(x, attended)
        h = _linear(layer_norm(x, blk.ln2_gain, blk.ln2_bias), blk.fc1_weight, blk.fc1_bias,
                    batch, rows)
        h = _linear(gelu(h), blk.fc2_weight, blk.fc2_bias, batch, rows)
        x = add(x, h)
    cls_row = reshape(slice_rows(x, 0, 1), (batch, config.embed_dim))
    normed = layer_norm(cls_row, segment.norm_gain, segment.norm_bias)
    return add(matmul(normed, transpose(segment.head_weight)), segment.head_bias)


def clone_client_segment(segment: ClientSegment) -> ClientSegment:
    return ClientSegment(
        patch_weight=Tensor(segment.patch_weight.values.copy(), requires_grad=True),
        patch_bias=Tensor(segment.patch_bias.values.copy(), requires_grad=True),
        pos_embed=Tensor(segment.pos_embed.values.copy(), requires_grad=True))


# ---------------------------------------------------------------------------
# Parameter checkpoint container.
#
# Layout (all little-endian):
#   magic b"SMXC" | u32 version (=1) | u32 tensor count
#   per tensor: u16 name length | utf-8 name | u8 ndim | ndim x u32 dims
#               | float32 payload (row-major)
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SMXC"
_CKPT_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(named)))
        for name, array in named.items():
            data = np.ascontiguousarray(array, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise IngestionError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        end = offset + 4 * size
        if end > len(blob):
            raise IngestionError(f"{path}: truncated payload for tensor '{name}'")
        named[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(dims).copy()
        offset = end
    return named


def segments_to_named(client: ClientSegment | None,
                      server: ServerSegment | None) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    if client is not None:
        for key, tensor in client.parameters().items():
            named[f"client.{key}"] = tensor.values
    if server is not None:
        for key, tensor in server.parameters().items():
            named[f"server.{key}"] = tensor.values
    return named


def named_to_segments(named: dict[str, np.ndarray],
                      config: ModelConfig) -> tuple[ClientSegment, ServerSegment]:
    client, server = init_parameters(config, seed=0)
    for key, tensor in client.parameters().items():
        tensor.values = np.asarray(named[f"client.{key}"], dtype=np.float32)
    for key, tensor in server.parameters().items():
        tensor.values = np.asarray(named[f"server.{key}"], dtype=np.float32)
    return client, server
