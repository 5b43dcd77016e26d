"""Round protocol: groups, routing, metering, state machine, transcripts."""

import math

import numpy as np
import pytest

from splitmix.data import make_synthetic
from splitmix.errors import ContractError, ProtocolError
from splitmix.mixing import CutSmashed, generate_mask_set, sample_mixing_counts
from splitmix.model import ModelConfig, clone_client_segment, client_forward, init_parameters, server_forward
from splitmix.optim import AdamW
from splitmix.protocol import (ClientState, MixGroup, RoundOptions,
                               SequenceAssignment, ServerBatch, ServerState,
                               UploadCutSmashed, activation_bytes,
                               fedavg_client_segments, form_groups, one_hot,
                               payload_meter, route_gradients, run_round,
                               validate_upload)
from splitmix.rng import RngHub
from splitmix.tensor import Tensor, backward, cross_entropy, mul, sum_all, zero_grads
from splitmix.transcript import TranscriptWriter, read_transcript

CFG = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8,
                  depth=1, heads=2, mlp_ratio=2.0, num_classes=4)


def build_system(n_clients, seed=0, config=CFG):
    base_client, server_segment = init_parameters(config, seed)
    clients = []
    for cid in range(n_clients):
        segment = clone_client_segment(base_client)
        clients.append(ClientState(
            client_id=cid, segment=segment,
            optimizer=AdamW(segment.parameters(), lr=1e-3)))
    server = ServerState(segment=server_segment,
                         optimizer=AdamW(server_segment.parameters(), lr=1e-3))
    return clients, server


def build_batches(n_clients, batch=4, seed=0, config=CFG):
    data = make_synthetic(n_clients * batch, config.num_classes, config.image_size,
                          seed, channels=config.channels)
    return {cid: (data.images[cid * batch:(cid + 1) * batch],
                  data.labels[cid * batch:(cid + 1) * batch])
            for cid in range(n_clients)}


class TestFormGroups:
    def test_even_pairs(self):
        groups = form_groups(range(10), 2, np.random.default_rng(0))
        assert sorted(len(g) for g in groups) == [2] * 5
        assert sorted(sum(groups, [])) == list(range(10))

    def test_three_way_with_singleton(self):
        groups = form_groups(range(7), 3, np.random.default_rng(1))
        assert sorted(len(g) for g in groups) == [1, 3, 3]

    def test_four_way_leftover_pair(self):
        groups = form_groups(range(10), 4, np.random.default_rng(2))
        assert sorted(len(g) for g in groups) == [2, 4, 4]

    def test_empty_clients_rejected(self):
        with pytest.raises(ContractError):
            form_groups([], 2, np.random.default_rng(0))


class TestRouting:
    def make_group(self, seed=0):
        counts = np.array([3, 5])
        masks = generate_mask_set(counts, 8, np.random.default_rng(seed))
        return MixGroup(0, [0, 1], counts, masks)

    def test_unicast_masks_rows(self):
        group = self.make_group()
        grad = np.random.default_rng(3).normal(size=(2, 8, 4)).astype(np.float32)
        downs = route_gradients(group, grad, "unicast")
        for down, mask in zip(downs, group.mask_set):
            assert down.rows == mask.sum()
            assert not down.grad[:, mask == 0, :].any()

    def test_unicast_sum_recovers_full_gradient(self):
        group = self.make_group(4)
        grad = np.random.default_rng(5).normal(size=(2, 8, 4)).astype(np.float32)
        downs = route_gradients(group, grad, "unicast")
        assert np.array_equal(downs[0].grad + downs[1].grad, grad)

    def test_broadcast_identical_copies(self):
        group = self.make_group(6)
        grad = np.random.default_rng(7).normal(size=(2, 8, 4)).astype(np.float32)
        downs = route_gradients(group, grad, "broadcast")
        assert len(downs) == 2
        assert np.array_equal(downs[0].grad, downs[1].grad)
        assert all(d.rows == 8 for d in downs)

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            route_gradients(self.make_group(), np.zeros((1, 8, 4), np.float32), "multicast")


class TestFedAvg:
    def test_idempotent_on_identical_segments(self):
        client, _ = init_parameters(CFG, seed=1)
        merged = fedavg_client_segments([client, clone_client_segment(client)])
        assert np.allclose(merged.patch_weight.values, client.patch_weight.values,
                           atol=1e-7)

    def test_opposite_segments_cancel(self):
        client, _ = init_parameters(CFG, seed=2)
        negated = clone_client_segment(client)
        for tensor in negated.parameters().values():
            tensor.values = -tensor.values
        merged = fedavg_client_segments([client, negated])
        for tensor in merged.parameters().values():
            assert np.allclose(tensor.values, 0.0, atol=1e-7)

    def test_three_segment_mean_matches_scalar_loop(self):
        segments = [init_parameters(CFG, seed=s)[0] for s in (3, 4, 5)]
        merged = fedavg_client_segments(segments)
        for name in ("patch_weight", "patch_bias", "pos_embed"):
            stacked = [seg.parameters()[name].values for seg in segments]
            flat = merged.parameters()[name].values.reshape(-1)
            for i in range(flat.size):
                expected = np.float32(
                    (float(stacked[0].reshape(-1)[i]) + float(stacked[1].reshape(-1)[i])
                     + float(stacked[2].reshape(-1)[i])) / 3.0)
                assert flat[i] == pytest.approx(expected, abs=1e-7)


class TestPayloadMeter:
    def make_upload(self, kept, tokens=16, dim=192, batch=128, classes=10):
        mask = np.zeros(tokens, dtype=np.uint8)
        mask[:kept] = 1
        grid = np.zeros((batch, tokens, dim), dtype=np.float32)
        grid[:, mask == 1, :] = 1.0
        return UploadCutSmashed(client_id=0,
                                cut=CutSmashed(tokens=grid, mask=mask, client_id=0),
                                label=np.zeros((batch, classes), np.float32))

    def test_full_smashed_paper_dimensions(self):
        msg = self.make_upload(16)
        assert activation_bytes(msg) == 16 * 192 * 4 * 128 == 1_572_864
        assert payload_meter(msg) == 1_572_864 + 16 + 10 * 4 * 128

    def test_even_two_way_is_half(self):
        assert activation_bytes(self.make_upload(8)) * 2 == activation_bytes(self.make_upload(16))

    def test_zero_allocation_transmits_nothing(self):
        assert payload_meter(self.make_upload(0)) == 0

    def test_sequence_assignment_is_one_integer(self):
        assert payload_meter(SequenceAssignment(0, np.ones(16, np.uint8))) == 8
        assert payload_meter(SequenceAssignment(0, np.ones(64, np.uint8))) == 8
        assert payload_meter(SequenceAssignment(0, np.ones(200, np.uint8))) == 25

    def test_upload_invariant_enforced(self):
        msg = self.make_upload(8)
        msg.cut.tokens[:, 12, :] = 5.0  # outside the mask
        with pytest.raises(ProtocolError, match="client 0"):
            validate_upload(msg)


class TestRunRound:
    def run(self, n, options, seed=0, batch=4):
        clients, server = build_system(n, seed)
        batches = build_batches(n, batch, seed)
        hub = RngHub(seed)
        return run_round(clients, server, batches, CFG, options, hub, 0)

    def test_two_clients_two_way_single_server_step(self):
        metrics = self.run(2, RoundOptions(k_way=2, alpha=math.inf))
        assert metrics.server_updates == 1

    def test_ten_clients_two_way_five_steps(self):
        metrics = self.run(10, RoundOptions(k_way=2, alpha=6.0))
        assert metrics.server_updates == 5

    def test_ktimes_mode_steps_n_times(self):
        metrics = self.run(10, RoundOptions(k_way=2, alpha=6.0, ktimes=True))
        assert metrics.server_updates == 10

    def test_plain_sl_steps_n_times(self):
        metrics = self.run(10, RoundOptions(k_way=1))
        assert metrics.server_updates == 10

    def test_summed_mode_takes_one_step(self):
        metrics = self.run(10, RoundOptions(k_way=2, alpha=6.0,
                                            server_step_mode="summed"))
        assert metrics.server_updates == 1

    def test_uplink_conservation(self):
        metrics = self.run(6, RoundOptions(k_way=3, alpha=6.0))
        assert metrics.total_uplink_bytes == sum(metrics.client_uplink_bytes.values())
        assert metrics.total_activation_bytes == sum(metrics.client_activation_bytes.values())

    def test_unequal_batches_rejected(self):
        clients, server = build_system(2)
        batches = build_batches(2, 4)
        images, labels = batches[1]
        batches[1] = (images[:2], labels[:2])
        with pytest.raises(ContractError):
            run_round(clients, server, batches, CFG, RoundOptions(), RngHub(0), 0)

    def test_expected_uplink_fraction_is_one_over_k(self):
        # Symmetric Dirichlet allocations: long-run activation fraction 1/k.
        hub = RngHub(99)
        rounds = 600
        k = 2
        total = np.zeros(k)
        for r in range(rounds):
            counts = sample_mixing_counts(k, 6.0, 16, hub.allocations(r, 0))
            total += counts / 16.0
        assert np.all(np.abs(total / rounds - 1.0 / k) < 0.02)


class TestGradientModes:
    def constructed_case(self):
        """Images black outside each client's mask so smashed rows vanish there.

        Bias and positional table are frozen: their Jacobians are constant,
        so only the activation-linked patch weight satisfies the
        zero-rows-kill-broadcast-extras argument.
        """
        config = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8,
                             depth=1, heads=2, mlp_ratio=2.0, num_classes=4)
        base, server_segment = init_parameters(config, seed=3)
        base.patch_bias.values[:] = 0.0
        base.pos_embed.values[:] = 0.0
        masks = generate_mask_set(np.array([2, 2]), 4, np.random.default_rng(8))
        rng = np.random.default_rng(9)
        clients, images = [], []
        for cid in range(2):
            seg = clone_client_segment(base)
            seg.patch_bias.requires_grad = False
            seg.pos_embed.requires_grad = False
            clients.append(seg)
            img = rng.uniform(0.2, 1.0, size=(3, 1, 8, 8)).astype(np.float32)
            for token in range(4):
                if masks[cid][token] == 0:
                    gy, gx = divmod(token, 2)
                    img[:, :, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4] = 0.0
            images.append(img)
        return config, clients, server_segment, masks, images

    def test_modes_agree_when_smashed_is_zero_outside_mask(self):
        config, segments, server_segment, masks, images = self.constructed_case()
        grads = {}
        for mode in ("unicast", "broadcast"):
            smashed, cuts = [], []
            for cid in range(2):
                s = client_forward(segments[cid], images[cid], config)
                grid = np.repeat(masks[cid][:, None].astype(np.float32),
                                 config.embed_dim, axis=1)
                smashed.append(s)
                cuts.append(mul(s, Tensor(grid)))
            mixed = cuts[0].values + cuts[1].values
            soft = np.full((3, 4), 0.25, dtype=np.float32)
            inputs = Tensor(mixed, requires_grad=True)
            loss = cross_entropy(server_forward(server_segment, inputs, config),
                                 Tensor(soft))
            backward(loss)
            group = MixGroup(0, [0, 1], np.array([2, 2]), masks)
            downs = route_gradients(group, inputs.grad, mode)
            for cid, down in enumerate(downs):
                carrier = smashed[cid] if mode == "broadcast" else cuts[cid]
                backward(sum_all(mul(carrier, Tensor(down.grad))))
                grads[(mode, cid)] = {k: t.grad.copy() for k, t
                                      in segments[cid].parameters().items()
                                      if t.requires_grad}
                zero_grads(segments[cid].parameters().values())
            zero_grads(server_segment.parameters().values())
        for cid in range(2):
            assert grads[("unicast", cid)]
            for key in grads[("unicast", cid)]:
                assert np.allclose(grads[("unicast", cid)][key],
                                   grads[("broadcast", cid)][key], atol=1e-6), key

    def test_modes_differ_on_general_inputs(self):
        # Difference norm is reported, not asserted against a bound.
        config = CFG
        clients, server = build_system(2, seed=5)
        batches = build_batches(2, 3, seed=5)
        norms = {}
        for mode in ("unicast", "broadcast"):
            segment = clone_client_segment(clients[0].segment)
            s = client_forward(segment, batches[0][0], config)
            masks = generate_mask_set(np.array([2, 2]), 4, np.random.default_rng(12))
            grid = np.repeat(masks[0][:, None].astype(np.float32), config.embed_dim, 1)
            cut_t = mul(s, Tensor(grid))
            other = client_forward(clients[1].segment, batches[1][0], config)
            other_cut = other.values * np.repeat(masks[1][:, None], config.embed_dim, 1)
            inputs = Tensor(cut_t.values + other_cut, requires_grad=True)
            loss = cross_entropy(server_forward(server.segment, inputs, config),
                                 Tensor(np.full((3, 4), 0.25, np.float32)))
            backward(loss)
            group = MixGroup(0, [0, 1], np.array([2, 2]), masks)
            down = route_gradients(group, inputs.grad, mode)[0]
            carrier = s if mode == "broadcast" else cut_t
            backward(sum_all(mul(carrier, Tensor(down.grad))))
            norms[mode] = float(np.linalg.norm(segment.patch_weight.grad))
            zero_grads(server.segment.parameters().values())
        print(f"unicast vs broadcast client-grad norms: {norms}")
        assert norms["unicast"] > 0 and norms["broadcast"] > 0


class TestDegenerateEquivalence:
    def test_k1_matches_unsplit_reference_over_rounds(self):
        """Split protocol with k=1 and full masks tracks a monolithic model."""
        config = CFG
        rounds = 20
        data = make_synthetic(rounds * 4, config.num_classes, config.image_size, 17,
                              channels=config.channels)

        clients, server = build_system(1, seed=21)
        hub = RngHub(21)
        split_losses = []
        for r in range(rounds):
            batch = {0: (data.images[r * 4:(r + 1) * 4], data.labels[r * 4:(r + 1) * 4])}
            metrics = run_round(clients, server, batch, config,
                                RoundOptions(k_way=1), hub, r)
            split_losses.append(metrics.train_loss)

        ref_client, ref_server = init_parameters(config, 21)
        opt_c = AdamW(ref_client.parameters(), lr=1e-3)
        opt_s = AdamW(ref_server.parameters(), lr=1e-3)
        ref_losses = []
        for r in range(rounds):
            images = data.images[r * 4:(r + 1) * 4]
            labels = one_hot(data.labels[r * 4:(r + 1) * 4], config.num_classes)
            logits = server_forward(ref_server, client_forward(ref_client, images, config),
                                    config)
            loss = cross_entropy(logits, Tensor(labels))
            backward(loss)
            opt_s.step()
            opt_s.zero_grads()
            opt_c.step()
            opt_c.zero_grads()
            ref_losses.append(float(loss.values))

        assert np.allclose(split_losses, ref_losses, atol=1e-5)


class TestTranscript:
    def test_round_trip_and_step_counts(self, tmp_path):
        path = tmp_path / "round.bin"
        clients, server = build_system(10, seed=2)
        batches = build_batches(10, 2, seed=2)
        with open(path, "wb") as fh:
            run_round(clients, server, batches, CFG,
                      RoundOptions(k_way=2, alpha=6.0), RngHub(2), 0,
                      transcript=TranscriptWriter(fh))
        records = read_transcript(path)
        kinds = [r["type"] for r in records]
        assert kinds[0] == "round_start" and kinds[-1] == "round_end"
        assert kinds.count("server_step") == 5
        assert kinds.count("client_step") == 10
        uploads = [r for r in records if r["type"] == "upload"]
        assert len(uploads) == 10
        for upload in uploads:
            off = upload["mask"] == 0
            assert not upload["tokens"][:, off, :].any()

    def test_ktimes_transcript_shows_n_steps(self, tmp_path):
        path = tmp_path / "ktimes.bin"
        clients, server = build_system(10, seed=3)
        batches = build_batches(10, 2, seed=3)
        with open(path, "wb") as fh:
            run_round(clients, server, batches, CFG,
                      RoundOptions(k_way=2, alpha=6.0, ktimes=True), RngHub(3), 0,
                      transcript=TranscriptWriter(fh))
        records = read_transcript(path)
        assert sum(r["type"] == "server_step" for r in records) == 10

    def test_identical_runs_identical_transcripts(self, tmp_path):
        blobs = []
        for run in range(2):
            path = tmp_path / f"t{run}.bin"
            clients, server = build_system(4, seed=5)
            batches = build_batches(4, 2, seed=5)
            with open(path, "wb") as fh:
                run_round(clients, server, batches, CFG,
                          RoundOptions(k_way=2, alpha=6.0, shuffle=True), RngHub(5), 0,
                          transcript=TranscriptWriter(fh))
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]
