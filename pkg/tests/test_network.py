"""Whole-network behavior: identity init, forward modes, checkpoints, fusion."""

import numpy as np
import pytest

from spikestream.blocks import SpikePurityError
from spikestream.network import (
    CheckpointError,
    NetworkConfig,
    StageSpec,
    build,
    fuse_network,
    load_checkpoint,
    save_checkpoint,
)
from spikestream.neuron import NeuronConfig, SurrogateConfig, sn_seq
from spikestream.numerics import ShapeError, Tensor, linear, spatial_mean, sum_time


def small_config(block_kind="logical", g="or", stages=None, t_steps=4, **kw):
    return NetworkConfig(
        in_channels=2,
        in_hw=(8, 8),
        t_steps=t_steps,
        num_classes=3,
        block_kind=block_kind,
        g=g if block_kind == "logical" else None,
        stem_channels=4,
        stages=stages or (StageSpec(blocks=2, channels=4),),
        **kw,
    )


def spike_input(rng, t, n, c, h, w, p=0.5):
    return (rng.random((t, n, c, h, w)) < p).astype(np.float32)


def randomize_norms(net, seed=0):
    """Give every batch norm non-trivial affine and running statistics."""
    rng = np.random.default_rng(seed)
    for u in net.units():
        bn = u.bn
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, bn.gamma.shape).astype(np.float32)
        bn.beta.data[...] = rng.uniform(-0.3, 0.3, bn.beta.shape).astype(np.float32)
        bn.running_mean.data[...] = rng.uniform(-0.2, 0.2, bn.running_mean.shape).astype(
            np.float32
        )
        bn.running_var.data[...] = rng.uniform(0.5, 1.5, bn.running_var.shape).astype(np.float32)


class TestIdentityInitialization:
    def test_fresh_network_reduces_to_stem_plus_heads(self):
        """With every body's last BN at zero, blocks are exact identities."""
        cfg = small_config(stages=(StageSpec(blocks=4, channels=4),))
        net = build(cfg, seed=3)
        rng = np.random.default_rng(0)
        x = spike_input(rng, cfg.t_steps, 5, 2, 8, 8)
        out = net.forward(x)

        flat = Tensor(x.reshape(-1, 2, 8, 8))
        from spikestream.blocks import ForwardContext

        ctx = ForwardContext(t_steps=cfg.t_steps)
        o0 = sn_seq(net.stem.forward(flat, ctx), cfg.t_steps, cfg.neuron, cfg.surrogate)
        want_s = linear(spatial_mean(sum_time(o0, cfg.t_steps)), net.head_s.weight, net.head_s.bias)
        assert np.array_equal(out.logits_s.data, want_s.data)

    def test_fresh_accumulation_head_sees_stem_spikes_only(self):
        """At identity init no block fires, so a_L is just the stem output."""
        cfg = small_config(stages=(StageSpec(blocks=3, channels=4),))
        net = build(cfg, seed=3)
        rng = np.random.default_rng(1)
        x = spike_input(rng, cfg.t_steps, 4, 2, 8, 8)
        out = net.forward(x)

        flat = Tensor(x.reshape(-1, 2, 8, 8))
        from spikestream.blocks import ForwardContext
        from spikestream.numerics import affine

        ctx = ForwardContext(t_steps=cfg.t_steps)
        o0 = sn_seq(net.stem.forward(flat, ctx), cfg.t_steps, cfg.neuron, cfg.surrogate)
        a_mean = affine(sum_time(o0, cfg.t_steps), 1.0 / cfg.t_steps, 0.0)
        want_a = linear(spatial_mean(a_mean), net.head_a.weight, net.head_a.bias)
        assert np.array_equal(out.logits_a.data, want_a.data)

    def test_depth_does_not_change_fresh_spike_maps(self):
        """Stacking more identity blocks leaves the network function alone."""
        from spikestream.blocks import ProbeLog

        rng = np.random.default_rng(2)
        x = spike_input(rng, 4, 3, 2, 8, 8)
        finals = []
        for depth in (1, 4, 8):
            cfg = small_config(stages=(StageSpec(blocks=depth, channels=4),))
            net = build(cfg, seed=11)
            probes = ProbeLog()
            net.forward(x, probes=probes)
            finals.append(probes.series("o")[-1][1].data)
        assert np.array_equal(finals[0], finals[1])
        assert np.array_equal(finals[0], finals[2])


class TestForwardModes:
    def test_fsnn_logits_match_dsnn_spike_head_exactly(self):
        cfg = small_config(g="xor", stages=(StageSpec(blocks=2, channels=4),))
        net = build(cfg, seed=5)
        randomize_norms(net, seed=5)
        rng = np.random.default_rng(3)
        x = spike_input(rng, cfg.t_steps, 4, 2, 8, 8)
        both = net.forward(x, mode="dsnn")
        spike_only = net.forward(x, mode="fsnn")
        assert np.array_equal(both.logits_s.data, spike_only.logits_s.data)
        assert spike_only.logits_a is None

    def test_spike_only_forward_refuses_accumulation_queries(self):
        cfg = small_config()
        net = build(cfg, seed=0)
        rng = np.random.default_rng(4)
        out = net.forward(spike_input(rng, 4, 2, 2, 8, 8), mode="fsnn")
        with pytest.raises(LookupError):
            out.require_accumulation()
        with pytest.raises(LookupError):
            out.combined("sum")
        assert out.combined("s_only").shape == (2, 3)

    def test_add_networks_cannot_run_spike_only(self):
        cfg = small_config(block_kind="add", g=None)
        net = build(cfg, seed=0)
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="full-spike"):
            net.forward(spike_input(rng, 4, 2, 2, 8, 8), mode="fsnn")

    def test_combined_sums_both_heads(self):
        cfg = small_config()
        net = build(cfg, seed=1)
        rng = np.random.default_rng(6)
        out = net.forward(spike_input(rng, 4, 2, 2, 8, 8))
        assert np.allclose(out.combined("sum"), out.logits_s.data + out.logits_a.data)
        assert out.predictions("s_only").shape == (2,)

    def test_input_shape_and_purity_are_enforced(self):
        cfg = small_config()
        net = build(cfg, seed=0)
        rng = np.random.default_rng(7)
        with pytest.raises(ShapeError):
            net.forward(spike_input(rng, 3, 2, 2, 8, 8))  # wrong T
        with pytest.raises(ShapeError):
            net.forward(spike_input(rng, 4, 2, 1, 8, 8))  # wrong channels
        with pytest.raises(SpikePurityError):
            net.forward(np.full((4, 2, 2, 8, 8), 0.5, dtype=np.float32))
        bad_rows = np.zeros((9, 2, 8, 8), dtype=np.float32)
        with pytest.raises(ShapeError):
            net.forward(bad_rows)

    def test_flattened_input_is_accepted(self):
        cfg = small_config()
        net = build(cfg, seed=2)
        rng = np.random.default_rng(8)
        x = spike_input(rng, 4, 3, 2, 8, 8)
        a = net.forward(x).logits_s.data
        b = net.forward(x.reshape(12, 2, 8, 8)).logits_s.data
        assert np.array_equal(a, b)


class TestConstruction:
    def test_same_seed_same_parameters(self):
        cfg = small_config()
        p1 = build(cfg, seed=9).parameters()
        p2 = build(cfg, seed=9).parameters()
        assert list(p1) == list(p2)
        for k in p1:
            assert np.array_equal(p1[k].data, p2[k].data), k

    def test_different_seeds_differ(self):
        cfg = small_config()
        w1 = build(cfg, seed=1).stem.conv.weight.data
        w2 = build(cfg, seed=2).stem.conv.weight.data
        assert not np.array_equal(w1, w2)

    def test_width_change_requires_downsample(self):
        cfg = small_config(
            stages=(StageSpec(blocks=1, channels=4), StageSpec(blocks=1, channels=8))
        )
        with pytest.raises(ShapeError, match="downsampl"):
            build(cfg, seed=0)

    def test_downsample_stage_halves_grid_and_widens(self):
        cfg = small_config(
            stages=(
                StageSpec(blocks=1, channels=4),
                StageSpec(blocks=2, channels=8, downsample=True),
            )
        )
        net = build(cfg, seed=0)
        rng = np.random.default_rng(9)
        out = net.forward(spike_input(rng, 4, 2, 2, 8, 8))
        assert out.logits_s.shape == (2, 3)
        down_block = net.blocks[1]
        assert down_block.downsamples
        assert down_block.conv1.out_hw == (4, 4)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="g in"):
            small_config(g="nand")
        with pytest.raises(ValueError, match="head_mode"):
            small_config(head_mode="mean")
        with pytest.raises(ValueError, match="threshold"):
            small_config(residual_v_threshold=1.5)
        with pytest.raises(ValueError, match="t_steps"):
            small_config(t_steps=0)
        with pytest.raises(ValueError, match="downsample"):
            small_config(downsample_sn=False)
        with pytest.raises(ValueError, match="classes"):
            NetworkConfig(in_channels=1, in_hw=(4, 4), t_steps=2, num_classes=1)

    def test_config_round_trips_through_dict(self):
        cfg = small_config(
            block_kind="sn_residual",
            g=None,
            stages=(StageSpec(1, 4), StageSpec(2, 8, downsample=True)),
            neuron=NeuronConfig(kind="lif", tau=2.0),
            surrogate=SurrogateConfig(alpha=3.0),
            downsample_sn=False,
        )
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_spike_only_layer_registry_excludes_accumulation_path(self):
        cfg = small_config(
            stages=(StageSpec(1, 4), StageSpec(1, 8, downsample=True))
        )
        net = build(cfg, seed=0)
        full = set(net.synaptic_names("dsnn"))
        spike = set(net.synaptic_names("fsnn"))
        assert "s1b0.down.accum" in full - spike
        assert "head.accum" in full - spike
        assert "s1b0.down.spike" in spike


class TestCheckpoints:
    def roundtrip(self, tmp_path, net):
        path = tmp_path / "net.spkc"
        save_checkpoint(path, net)
        return path, load_checkpoint(path)

    def test_roundtrip_is_byte_identical(self, tmp_path):
        cfg = small_config(stages=(StageSpec(1, 4), StageSpec(1, 8, downsample=True)))
        net = build(cfg, seed=13)
        randomize_norms(net, seed=13)
        _, loaded = self.roundtrip(tmp_path, net)
        assert loaded.config == cfg
        orig, back = net.state_tensors(), loaded.state_tensors()
        assert list(orig) == list(back)
        for k in orig:
            assert np.array_equal(orig[k].data, back[k].data), k
        rng = np.random.default_rng(10)
        x = spike_input(rng, 4, 2, 2, 8, 8)
        assert np.array_equal(net.forward(x).logits_s.data, loaded.forward(x).logits_s.data)

    def test_corruption_is_detected(self, tmp_path):
        net = build(small_config(), seed=0)
        path = tmp_path / "net.spkc"
        save_checkpoint(path, net)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic_and_truncation_are_detected(self, tmp_path):
        net = build(small_config(), seed=0)
        path = tmp_path / "net.spkc"
        save_checkpoint(path, net)
        blob = path.read_bytes()
        (tmp_path / "junk.spkc").write_bytes(b"JUNK" + blob[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "junk.spkc")
        (tmp_path / "cut.spkc").write_bytes(blob[: len(blob) // 3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.spkc")

    def test_fused_networks_round_trip(self, tmp_path):
        net = build(small_config(), seed=4)
        randomize_norms(net, seed=4)
        fused = fuse_network(net)
        _, loaded = self.roundtrip(tmp_path, fused)
        assert loaded.fused
        rng = np.random.default_rng(11)
        x = spike_input(rng, 4, 2, 2, 8, 8)
        assert np.array_equal(fused.forward(x).logits_s.data, loaded.forward(x).logits_s.data)


class TestFusion:
    @pytest.mark.parametrize(
        "kind,g,down_sn",
        [
            ("logical", "or", True),
            ("logical", "iand", True),
            ("logical", "xor", True),
            ("sn_residual", None, False),
            ("sn_residual", None, True),
            ("add", None, True),
        ],
    )
    def test_fused_matches_unfused_inference(self, kind, g, down_sn):
        cfg = small_config(
            block_kind=kind,
            g=g,
            stages=(StageSpec(1, 4), StageSpec(1, 8, downsample=True)),
            downsample_sn=down_sn,
        )
        net = build(cfg, seed=21)
        randomize_norms(net, seed=21)
        fused = fuse_network(net)
        rng = np.random.default_rng(12)
        x = spike_input(rng, 4, 4, 2, 8, 8)
        a = net.forward(x)
        b = fused.forward(x)
        assert np.allclose(a.logits_s.data, b.logits_s.data, rtol=1e-5, atol=1e-5)
        assert np.allclose(a.logits_a.data, b.logits_a.data, rtol=1e-5, atol=1e-5)

    def test_fusing_twice_is_refused(self):
        net = build(small_config(), seed=0)
        fused = fuse_network(net)
        with pytest.raises(ValueError, match="already fused"):
            fuse_network(fused)

    def test_fusion_leaves_source_untouched(self):
        net = build(small_config(), seed=6)
        randomize_norms(net, seed=6)
        before = {k: t.data.copy() for k, t in net.state_tensors().items()}
        fuse_network(net)
        after = net.state_tensors()
        assert not net.fused
        for k, v in before.items():
            assert np.array_equal(v, after[k].data), k
        assert net.units()[0].bn is not None
