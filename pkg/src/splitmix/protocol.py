"""Client / mixer / server round protocol.

One training round runs, in order: group formation, sequence (mask)
generation, client forward + cut, upload with payload metering, mixing,
server forward/backward with one optimizer step per group, gradient
download (unicast or broadcast), client backward + steps, optional
federated averaging of the client segments.

The client and server computation graphs are deliberately severed at the
upload boundary: the server consumes plain arrays and returns the gradient
of its loss with respect to the mixed activations; clients re-inject that
gradient into their own graphs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ProtocolError
from .mixing import (CutMixBatch, CutSmashed, CutoutMasker, add_label_noise,
                     cutmix_assemble, generate_mask_set, sample_mixing_counts,
                     shuffle_tokens, unshuffle_grid)
from .model import ClientSegment, ModelConfig, ServerSegment, client_forward, server_forward
from .optim import AdamW
from .rng import RngHub
from .tensor import Tensor, add, backward, cross_entropy, mul, sum_all

HEADER_BYTES = 16
FLOAT_BYTES = 4


# ---------------------------------------------------------------------------
# Messages and payload accounting
# ---------------------------------------------------------------------------

@dataclass
class SequenceAssignment:
    client_id: int
    mask: np.ndarray


@dataclass
class UploadCutSmashed:
    client_id: int
    cut: CutSmashed
    label: np.ndarray  # (batch, classes) probability rows


@dataclass
class ServerBatch:
    group_id: int
    cutmix: CutMixBatch


@dataclass
class GradientDown:
    target: int  # client id (unicast / per-member broadcast copy)
    grad: np.ndarray  # (batch, M, d)
    rows: int  # token rows actually transmitted
    broadcast: bool = False


def activation_bytes(msg: UploadCutSmashed) -> int:
    """Transmitted activation payload: a_i * d * 4 * batch (0 if nothing sent)."""
    kept = int(msg.cut.mask.sum())
    if kept == 0:
        return 0
    batch, _, dim = msg.cut.tokens.shape
    return kept * dim * FLOAT_BYTES * batch


def payload_meter(msg) -> int:
    """Size in bytes of one message on the wire.

    Uploads count only transmitted rows plus the label rows and a fixed
    header; a mask rides along as a single 64-bit integer while M <= 64.
    A client with a zero allocation transmits nothing at all.
    """
    if isinstance(msg, UploadCutSmashed):
        act = activation_bytes(msg)
        if act == 0:
            return 0
        batch = msg.cut.tokens.shape[0]
        classes = msg.label.shape[-1]
        return act + HEADER_BYTES + classes * FLOAT_BYTES * batch
    if isinstance(msg, SequenceAssignment):
        length = msg.mask.shape[0]
        return 8 if length <= 64 else math.ceil(length / 8)
    if isinstance(msg, ServerBatch):
        batch, rows, dim = msg.cutmix.tokens.shape
        classes = msg.cutmix.soft_label.shape[-1]
        return rows * dim * FLOAT_BYTES * batch + classes * FLOAT_BYTES * batch + HEADER_BYTES
    if isinstance(msg, GradientDown):
        batch, _, dim = msg.grad.shape
        return msg.rows * dim * FLOAT_BYTES * batch + HEADER_BYTES
    raise ContractError(f"unmeterable message type {type(msg).__name__}")


def validate_upload(msg: UploadCutSmashed) -> None:
    """Enforce that untransmitted rows are exactly zero before metering."""
    off = msg.cut.mask == 0
    if off.any() and np.any(msg.cut.tokens[:, off, :]):
        raise ProtocolError(
            f"client {msg.client_id} uploaded nonzero data at a masked-out position")


# ---------------------------------------------------------------------------
# Groups and gradient routing
# ---------------------------------------------------------------------------

@dataclass
class MixGroup:
    group_id: int
    members: list[int]
    allocation: np.ndarray | None = None
    mask_set: np.ndarray | None = None


def form_groups(clients, k: int, rng: np.random.Generator) -> list[list[int]]:
    """Random disjoint groups of size k covering all clients.

    Remainder rule: a single leftover client forms a plain-SL singleton;
    r >= 2 leftovers form one r-way group.
    """
    ids = list(clients)
    if not ids:
        raise ContractError("cannot form groups from an empty client set")
    if k <= 0:
        raise ContractError(f"group size must be positive, got {k}")
    order = [ids[i] for i in rng.permutation(len(ids))]
    whole = (len(order) // k) * k
    groups = [order[i:i + k] for i in range(0, whole, k)]
    if whole < len(order):
        groups.append(order[whole:])
    return groups


def route_gradients(group: MixGroup, grad_wrt_cutmix: np.ndarray,
                    mode: str) -> list[GradientDown]:
    """Unicast sends each member only its own mask's rows; broadcast sends all."""
    if mode == "unicast":
        downs = []
        for member, mask in zip(group.members, group.mask_set):
            masked = grad_wrt_cutmix * mask[:, None].astype(np.float32)
            downs.append(GradientDown(target=member, grad=masked, rows=int(mask.sum())))
        return downs
    if mode == "broadcast":
        rows = grad_wrt_cutmix.shape[-2]
        return [GradientDown(target=member, grad=grad_wrt_cutmix, rows=rows, broadcast=True)
                for member in group.members]
    raise ContractError(f"unknown gradient mode {mode!r}")


def fedavg_client_segments(segments: list[ClientSegment],
                           weights: list[float] | None = None) -> ClientSegment:
    """Elementwise (optionally weighted) mean of every client parameter."""
    if not segments:
        raise ContractError("fedavg over an empty segment list")
    if weights is None:
        weights = [1.0 / len(segments)] * len(segments)
    else:
        total = float(sum(weights))
        weights = [w / total for w in weights]
    reference = segments[0].parameters()
    averaged: dict[str, np.ndarray] = {}
    for name, tensor in reference.items():
        acc = np.zeros_like(tensor.values, dtype=np.float64)
        for seg, w in zip(segments, weights):
            other = seg.parameters()[name]
            if other.values.shape != tensor.values.shape:
                raise DimensionError(
                    f"fedavg: parameter {name} shapes differ "
                    f"({other.values.shape} vs {tensor.values.shape})")
            acc += w * other.values.astype(np.float64)
        averaged[name] = acc.astype(np.float32)
    return ClientSegment(
        patch_weight=Tensor(averaged["patch_weight"], requires_grad=True),
        patch_bias=Tensor(averaged["patch_bias"], requires_grad=True),
        pos_embed=Tensor(averaged["pos_embed"], requires_grad=True))


# ---------------------------------------------------------------------------
# Round execution
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    segment: ClientSegment
    optimizer: AdamW
    masker: CutoutMasker | None = None  # token cutout for the k=1 baseline


@dataclass
class ServerState:
    segment: ServerSegment
    optimizer: AdamW


@dataclass
class RoundOptions:
    k_way: int = 1
    alpha: float = math.inf
    gradient_mode: str = "unicast"
    shuffle: bool = False
    ktimes: bool = False
    server_step_mode: str = "per_group"  # or "summed": one step over summed grads
    noise_x: float = 0.0
    noise_y: float = 0.0
    apply_fedavg: bool = False


@dataclass
class RoundMetrics:
    round_index: int
    client_activation_bytes: dict[int, int]
    client_uplink_bytes: dict[int, int]
    total_uplink_bytes: int
    total_activation_bytes: int
    server_updates: int
    train_loss: float
    eval_accuracy: float | None = None
    wall_time: float = 0.0


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _full_mask(tokens: int) -> np.ndarray:
    return np.ones(tokens, dtype=np.uint8)


def run_round(clients: list[ClientState], server: ServerState,
              batches: dict[int, tuple[np.ndarray, np.ndarray]],
              model_config: ModelConfig, options: RoundOptions, hub: RngHub,
              round_index: int, transcript=None) -> RoundMetrics:
    """Execute one synchronous training round and return its metrics."""
    start = time.perf_counter()
    tokens = model_config.tokens
    num_classes = model_config.num_classes
    by_id = {c.client_id: c for c in clients}
    batch_sizes = {cid: batches[cid][0].shape[0] for cid in by_id}
    if len(set(batch_sizes.values())) > 1:
        raise ContractError(f"clients hold unequal batch sizes: {batch_sizes}")

    if transcript is not None:
        transcript.round_start(round_index)

    member_lists = form_groups(list(by_id), options.k_way, hub.groups(round_index))
    groups = [MixGroup(gid, members) for gid, members in enumerate(member_lists)]

    act_bytes = {cid: 0 for cid in by_id}
    uplink = {cid: 0 for cid in by_id}
    losses: list[float] = []
    server_updates = 0

    # --- mixer: sequence generation; clients: forward, cut, upload -------
    uploads: dict[int, UploadCutSmashed] = {}
    client_graphs: dict[int, tuple[Tensor, Tensor]] = {}  # full smashed, cut smashed
    for group in groups:
        k_here = len(group.members)
        if k_here == 1 and by_id[group.members[0]].masker is not None:
            mask_set = by_id[group.members[0]].masker.next_mask()[None, :]
            allocation = np.array([int(mask_set[0].sum())], dtype=np.int64)
        elif k_here == 1:
            mask_set = _full_mask(tokens)[None, :]
            allocation = np.array([tokens], dtype=np.int64)
        else:
            allocation = sample_mixing_counts(
                k_here, options.alpha, tokens, hub.allocations(round_index, group.group_id))
            mask_set = generate_mask_set(
                allocation, tokens, hub.masks(round_index, group.group_id))
        group.allocation = allocation
        group.mask_set = mask_set

        for member, mask in zip(group.members, mask_set):
            assignment = SequenceAssignment(client_id=member, mask=mask)
            if transcript is not None:
                transcript.sequence(assignment)
            state = by_id[member]
            images, labels = batches[member]
            smashed = client_forward(state.segment, images, model_config)
            if options.noise_x > 0:
                noise = hub.noise(round_index, member, 0).normal(
                    0.0, options.noise_x, size=smashed.shape).astype(np.float32)
                smashed = add(smashed, Tensor(noise))
            mask_grid = np.repeat(mask[:, None].astype(np.float32),
                                  model_config.embed_dim, axis=1)
            cut_smashed = mul(smashed, Tensor(mask_grid))
            label_rows = one_hot(labels, num_classes)
            if options.noise_y > 0:
                label_rows = add_label_noise(label_rows, options.noise_y,
                                             hub.noise(round_index, member, 1))
            upload = UploadCutSmashed(
                client_id=member,
                cut=CutSmashed(tokens=cut_smashed.values, mask=mask, client_id=member),
                label=label_rows)
            validate_upload(upload)
            uploads[member] = upload
            client_graphs[member] = (smashed, cut_smashed)
            act_bytes[member] = activation_bytes(upload)
            uplink[member] = payload_meter(upload)
            if transcript is not None:
                transcript.upload(upload)

    # --- mixer: assemble (and optionally shuffle) each group's batch -----
    assembled: dict[int, tuple[CutMixBatch, np.ndarray | None]] = {}
    for group in groups:
        parts = [uploads[m].cut for m in group.members]
        labels = [uploads[m].label for m in group.members]
        if len(parts) == 1:
            mixed = CutMixBatch(tokens=parts[0].tokens, soft_label=labels[0],
                                group_id=group.group_id)
        else:
            mixed = cutmix_assemble(parts, labels, group.allocation, tokens)
            mixed.group_id = group.group_id
        perms = None
        if options.shuffle:
            mixed, perms = shuffle_tokens(mixed, hub.shuffles(round_index, group.group_id))
        assembled[group.group_id] = (mixed, perms)
        batch_msg = ServerBatch(group_id=group.group_id, cutmix=mixed)
        if transcript is not None:
            transcript.server_batch(batch_msg)

    # --- server: forward, loss, backward, step; route gradients ----------
    deliveries: dict[int, GradientDown] = {}

    def server_pass(mixed: CutMixBatch) -> tuple[float, np.ndarray]:
        inputs = Tensor(mixed.tokens, requires_grad=True)
        logits = server_forward(server.segment, inputs, model_config)
        loss = cross_entropy(logits, Tensor(mixed.soft_label))
        backward(loss)
        return float(loss.values), inputs.grad.copy()

    def deliver(downs: list[GradientDown]) -> None:
        for down in downs:
            deliveries[down.target] = down
            if transcript is not None:
                transcript.gradient_down(down)

    if options.ktimes:
        # One server pass (and step) per member; each pass's gradient flows
        # to that member alone, so the server updates n times per round.
        for group in groups:
            mixed, perms = assembled[group.group_id]
            for member in group.members:
                loss_value, grad_in = server_pass(mixed)
                server.optimizer.step()
                server.optimizer.zero_grads()
                server_updates += 1
                if transcript is not None:
                    transcript.server_step(group.group_id)
                if perms is not None:
                    grad_in = unshuffle_grid(grad_in, perms)
                downs = route_gradients(group, grad_in, options.gradient_mode)
                deliver([d for d in downs if d.target == member])
                losses.append(loss_value)
    else:
        for group in groups:
            mixed, perms = assembled[group.group_id]
            loss_value, grad_in = server_pass(mixed)
            if options.server_step_mode == "per_group":
                server.optimizer.step()
                server.optimizer.zero_grads()
                server_updates += 1
                if transcript is not None:
                    transcript.server_step(group.group_id)
            if perms is not None:
                grad_in = unshuffle_grid(grad_in, perms)
            deliver(route_gradients(group, grad_in, options.gradient_mode))
            losses.append(loss_value)
        if options.server_step_mode == "summed":
            # Gradients from all groups accumulated; single update.
            server.optimizer.step()
            server.optimizer.zero_grads()
            server_updates += 1
            if transcript is not None:
                transcript.server_step(-1)
        elif options.server_step_mode != "per_group":
            raise ContractError(f"unknown server_step_mode {options.server_step_mode!r}")

    # --- clients: backward through received gradient, then step ----------
    for cid, down in deliveries.items():
        state = by_id[cid]
        full_smashed, cut_smashed = client_graphs[cid]
        carrier = full_smashed if down.broadcast else cut_smashed
        proxy = sum_all(mul(carrier, Tensor(down.grad)))
        backward(proxy)
        state.optimizer.step()
        state.optimizer.zero_grads()
        if transcript is not None:
            transcript.client_step(cid)

    if options.apply_fedavg:
        averaged = fedavg_client_segments([c.segment for c in clients])
        for state in clients:
            for name, tensor in state.segment.parameters().items():
                tensor.values = averaged.parameters()[name].values.copy()

    total_uplink = int(sum(uplink.values()))
    metrics = RoundMetrics(
        round_index=round_index,
        client_activation_bytes=act_bytes,
        client_uplink_bytes=uplink,
        total_uplink_bytes=total_uplink,
        total_activation_bytes=int(sum(act_bytes.values())),
        server_updates=server_updates,
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        wall_time=time.perf_counter() - start)
    if transcript is not None:
        transcript.round_end(round_index, total_uplink)
    return metrics
