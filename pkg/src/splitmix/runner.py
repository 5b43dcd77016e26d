"""Experiment orchestration: training runs, evaluation, attack suites, metrics files."""

from __future__ import annotations

import csv
import json
import os
import time

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, load_cifar10, make_synthetic, partition
from .errors import ContractError, IngestionError
from .mixing import CutoutMasker
from .model import (PROFILES, ModelConfig, clone_client_segment, client_forward,
                    init_parameters, server_forward)
from .optim import AdamW, WarmupCosine
from .privacy import (REPRESENTATIONS, AttackConfig, AttackReport, Snapshot,
                      run_attack)
from .protocol import (ClientState, RoundMetrics, RoundOptions, ServerState,
                       fedavg_client_segments, run_round)
from .rng import RngHub
from .transcript import TranscriptWriter

CSV_SCHEMA = "splitmix-metrics-v1"
ATTACK_FRACTIONS = (0.1, 1.0)


def model_config_for(cfg: ExperimentConfig) -> ModelConfig:
    return PROFILES[cfg.profile]


def load_experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        data_dir = cfg.resolved_data_dir()
        if not data_dir:
            raise IngestionError(
                "cifar10 requires --data-dir or the SPLITMIX_DATA_DIR environment variable")
        train, test = load_cifar10(data_dir)
        if cfg.cifar_subset:
            hub = RngHub(cfg.seed)
            keep = hub.data(2).permutation(len(train))[:cfg.cifar_subset]
            train = train.subset(np.sort(keep))
        return train, test
    mc = model_config_for(cfg)
    total = cfg.synthetic_samples + cfg.synthetic_test
    full = make_synthetic(total, cfg.synthetic_classes, mc.image_size, cfg.seed,
                          channels=mc.channels, noise_std=cfg.synthetic_noise,
                          jitter=cfg.synthetic_jitter, blob_radius=cfg.synthetic_radius,
                          mosaic_std=cfg.synthetic_mosaic,
                          mosaic_cell=mc.patch_size)
    train = full.subset(np.arange(cfg.synthetic_samples))
    test = full.subset(np.arange(cfg.synthetic_samples, total))
    return train, test


class TrainingSystem:
    """Clients, server, optimizers, and per-client data shards."""

    def __init__(self, cfg: ExperimentConfig, model_cfg: ModelConfig,
                 train: Dataset, hub: RngHub):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.hub = hub
        shards = partition(train, cfg.n_clients, cfg.partition_mode, hub.data(0),
                           cfg.dirichlet_mu)
        self.shards = shards
        self.train = train
        base_client, server_segment = init_parameters(model_cfg, cfg.seed)
        self.clients: list[ClientState] = []
        for cid in range(cfg.n_clients):
            segment = clone_client_segment(base_client)
            masker = None
            if cfg.keep_ratio < 1.0:
                masker = CutoutMasker(cfg.keep_ratio, cfg.mask_mode, model_cfg.tokens,
                                      hub.masks(cid, 0, 1))
            self.clients.append(ClientState(
                client_id=cid, segment=segment,
                optimizer=AdamW(segment.parameters(), lr=cfg.lr,
                                weight_decay=cfg.weight_decay),
                masker=masker))
        self.server = ServerState(
            segment=server_segment,
            optimizer=AdamW(server_segment.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay))
        sizes = [len(s) for s in shards]
        self.rounds_per_epoch = min(sizes) // cfg.batch_size
        if self.rounds_per_epoch < 1:
            raise ContractError(
                f"smallest client shard ({min(sizes)} samples) cannot fill a "
                f"batch of {cfg.batch_size}")

    def batches_for(self, epoch: int, round_in_epoch: int) -> dict:
        cfg = self.cfg
        out = {}
        for state in self.clients:
            shard = self.shards[state.client_id]
            order = self.hub.data(1, state.client_id, epoch).permutation(len(shard))
            take = shard[order[round_in_epoch * cfg.batch_size:
                               (round_in_epoch + 1) * cfg.batch_size]]
            out[state.client_id] = (self.train.images[take], self.train.labels[take])
        return out

    def round_options(self, apply_fedavg: bool) -> RoundOptions:
        cfg = self.cfg
        return RoundOptions(
            k_way=cfg.effective_k, alpha=cfg.alpha_value,
            gradient_mode=cfg.gradient_mode, shuffle=cfg.shuffle,
            ktimes=cfg.method == "cutmixsl_ktimes",
            server_step_mode=cfg.server_step_mode,
            noise_x=cfg.noise_x, noise_y=cfg.noise_y,
            apply_fedavg=apply_fedavg)


def _forward_accuracy(segment, server, dataset: Dataset, model_cfg: ModelConfig,
                      chunk: int = 256) -> float:
    correct = 0
    for start in range(0, len(dataset), chunk):
        images = dataset.images[start:start + chunk]
        labels = dataset.labels[start:start + chunk]
        tokens = client_forward(segment, images, model_cfg)
        logits = server_forward(server.segment, tokens, model_cfg)
        correct += int((logits.values.argmax(axis=1) == labels).sum())
    return correct / max(1, len(dataset))


def evaluate(system: TrainingSystem, test: Dataset) -> float:
    """FedAvg-averaged client segment when averaging is on, else the mean
    of per-client accuracies."""
    if system.cfg.fedavg_enabled:
        merged = fedavg_client_segments([c.segment for c in system.clients])
        return _forward_accuracy(merged, system.server, test, system.model_cfg)
    accs = [_forward_accuracy(c.segment, system.server, test, system.model_cfg)
            for c in system.clients]
    return float(np.mean(accs))


def _csv_header(n_clients: int) -> list[str]:
    return (["round"] + [f"client{c}_bytes" for c in range(n_clients)]
            + ["total_bytes", "server_updates", "loss", "acc"])


def _csv_row(metrics: RoundMetrics, n_clients: int) -> list[str]:
    row = [str(metrics.round_index)]
    row += [str(metrics.client_uplink_bytes.get(c, 0)) for c in range(n_clients)]
    row += [str(metrics.total_uplink_bytes), str(metrics.server_updates),
            f"{metrics.train_loss:.6f}",
            "" if metrics.eval_accuracy is None else f"{metrics.eval_accuracy:.4f}"]
    return row


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Train per the config; write per-round CSV metrics and a JSON summary."""
    started = time.perf_counter()
    model_cfg = model_config_for(cfg)
    train, test = load_experiment_data(cfg)
    hub = RngHub(cfg.seed)
    system = TrainingSystem(cfg, model_cfg, train, hub)

    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")
    summary_path = os.path.join(cfg.out_dir, "summary.json")
    transcript_path = os.path.join(cfg.out_dir, "transcript.bin")

    total_rounds = cfg.epochs * system.rounds_per_epoch
    schedule = WarmupCosine(cfg.lr, total_rounds,
                            cfg.warmup_epochs * system.rounds_per_epoch)

    transcript_fh = open(transcript_path, "wb") if cfg.write_transcript else None
    transcript = TranscriptWriter(transcript_fh) if transcript_fh else None

    best_acc = 0.0
    final_acc = None
    total_uplink = 0
    total_activation = 0
    server_updates_total = 0
    global_round = 0
    try:
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {CSV_SCHEMA}\n")
            writer = csv.writer(fh)
            writer.writerow(_csv_header(cfg.n_clients))
            for epoch in range(cfg.epochs):
                for r in range(system.rounds_per_epoch):
                    lr = schedule.lr_at(global_round)
                    for state in system.clients:
                        state.optimizer.lr = lr
                    system.server.optimizer.lr = lr
                    last_of_epoch = r == system.rounds_per_epoch - 1
                    apply_fedavg = cfg.fedavg_enabled and (
                        cfg.fedavg_cadence == "round" or last_of_epoch)
                    metrics = run_round(system.clients, system.server,
                                        system.batches_for(epoch, r), model_cfg,
                                        system.round_options(apply_fedavg), hub,
                                        global_round, transcript)
                    if last_of_epoch and (epoch + 1) % cfg.eval_every == 0:
                        acc = evaluate(system, test)
                        metrics.eval_accuracy = acc
                        best_acc = max(best_acc, acc)
                        final_acc = acc
                    writer.writerow(_csv_row(metrics, cfg.n_clients))
                    total_uplink += metrics.total_uplink_bytes
                    total_activation += metrics.total_activation_bytes
                    server_updates_total += metrics.server_updates
                    global_round += 1
    finally:
        if transcript_fh:
            transcript_fh.close()

    summary = {
        "config": cfg.to_dict(),
        "schema": CSV_SCHEMA,
        "rounds": global_round,
        "best_top1": best_acc,
        "final_top1": final_acc,
        "total_uplink_bytes": total_uplink,
        "total_activation_bytes": total_activation,
        "server_updates_total": server_updates_total,
        "elapsed_seconds": round(time.perf_counter() - started, 3),
        "metrics_csv": csv_path,
    }
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def train_snapshot(cfg: ExperimentConfig) -> tuple[Snapshot, Dataset]:
    """Short parallel-SL run to produce the frozen client segment attacks use."""
    model_cfg = model_config_for(cfg)
    train, test = load_experiment_data(cfg)
    hub = RngHub(cfg.seed)
    pre_cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "method": "parallel_sl",
                                          "k_way": 1, "fedavg": None,
                                          "epochs": cfg.attack_pretrain_epochs,
                                          "keep_ratio": 1.0})
    system = TrainingSystem(pre_cfg, model_cfg, train, hub)
    schedule = WarmupCosine(pre_cfg.lr, pre_cfg.epochs * system.rounds_per_epoch, 0)
    global_round = 0
    for epoch in range(pre_cfg.epochs):
        for r in range(system.rounds_per_epoch):
            lr = schedule.lr_at(global_round)
            for state in system.clients:
                state.optimizer.lr = lr
            system.server.optimizer.lr = lr
            run_round(system.clients, system.server, system.batches_for(epoch, r),
                      model_cfg, system.round_options(False), hub, global_round)
            global_round += 1
    snapshot = Snapshot(client_segment=system.clients[0].segment,
                        dataset=train, model_config=model_cfg)
    return snapshot, test


def run_attack_suite(cfg: ExperimentConfig, snapshot: Snapshot | None = None) -> dict:
    """Five representations x fractions {0.1, 1.0}; table-shaped JSON output."""
    if snapshot is None:
        snapshot, _ = train_snapshot(cfg)
    seed = cfg.attack_seed if cfg.attack_seed is not None else cfg.seed
    reports: list[AttackReport] = []
    table: dict[str, dict[str, float]] = {}
    for representation in REPRESENTATIONS:
        table[representation] = {}
        for fraction in ATTACK_FRACTIONS:
            attack = AttackConfig(
                representation=representation, train_fraction=fraction,
                decoder_width=cfg.attack_decoder_width,
                decoder_depth=cfg.attack_decoder_depth,
                epochs=cfg.attack_epochs, batch_size=cfg.attack_batch_size,
                lr=cfg.attack_lr, seed=seed, keep_ratio=cfg.attack_keep_ratio,
                cutmix_alpha=cfg.attack_alpha)
            report = run_attack(attack, snapshot)
            reports.append(report)
            table[representation][str(fraction)] = report.test_mse
    result = {
        "config": cfg.to_dict(),
        "fractions": list(ATTACK_FRACTIONS),
        "mse": table,
        "reports": [json.loads(r.to_json()) for r in reports],
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "attack_report.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    return result
