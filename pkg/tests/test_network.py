"""Network assembly: channel ladder, determinism, shape contract, checkpoints."""

import numpy as np
import pytest

from carunet.blocks import parameter_count
from carunet.errors import CheckpointError, ConfigError, ShapeError
from carunet.network import CarUnetConfig, build_network, load_weights, save_weights
from carunet.tensor import Tape, Tensor, backward
from carunet.training import bce_loss


def small_config(**kw):
    base = dict(in_channels=3, base_channels=2, depth=2, dropblock_rate=0.0, seed=11)
    base.update(kw)
    return CarUnetConfig(**base)


def test_channel_ladder_depth4_base16():
    net = build_network(CarUnetConfig(in_channels=3, base_channels=16, depth=4, seed=1))
    enc_out = [enc.out_channels for enc in net.encoders]
    assert enc_out == [16, 32, 64, 128]
    assert net.bottleneck.out_channels == 256
    assert [dec.out_channels for dec in net.decoders] == [128, 64, 32, 16]
    assert net.head.weight.shape == (1, 16, 1, 1)


def test_smallest_legal_network_runs():
    net = build_network(CarUnetConfig(in_channels=3, base_channels=1, depth=1, dropblock_rate=0.0, seed=2))
    net.set_mode("eval")
    out = net.forward(Tensor(np.random.default_rng(0).random((1, 3, 4, 4), dtype=np.float32)))
    assert out.shape == (1, 1, 4, 4)


def test_same_seed_builds_identical_parameter_bytes():
    a = build_network(small_config())
    b = build_network(small_config())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()


def test_different_seed_differs():
    a = build_network(small_config())
    b = build_network(small_config(seed=12))
    assert any(pa.data.tobytes() != pb.data.tobytes() for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()))


@pytest.mark.parametrize("hw", [(16, 16), (32, 16), (64, 64)])
def test_forward_preserves_spatial_size(hw):
    net = build_network(small_config())
    net.set_mode("eval")
    x = Tensor(np.random.default_rng(1).random((1, 3, *hw), dtype=np.float32))
    out = net.forward(x)
    assert out.shape == (1, 1, *hw)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_forward_rejects_indivisible_size():
    net = build_network(small_config(depth=2))
    with pytest.raises(ShapeError, match="2\\^depth"):
        net.forward(Tensor(np.zeros((1, 3, 18, 16), dtype=np.float32)))


def test_forward_rejects_wrong_channels():
    net = build_network(small_config())
    with pytest.raises(ShapeError, match="channels"):
        net.forward(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)))


def test_config_validation():
    with pytest.raises(ConfigError):
        CarUnetConfig(base_channels=0).validate()
    with pytest.raises(ConfigError):
        CarUnetConfig(dropblock_size=4).validate()
    with pytest.raises(ConfigError):
        CarUnetConfig(meca_placement="nowhere").validate()


def test_skip_attention_one_module_per_level_three_params_each():
    depth = 3
    net = build_network(small_config(depth=depth, base_channels=2))
    assert len(net.skip_mecas) == depth
    skip_params = [p for n, p in net.named_parameters() if n.startswith("skip_meca")]
    assert len(skip_params) == depth
    assert sum(p.size for p in skip_params) == 3 * depth


def test_gradient_reaches_every_parameter_group():
    # across 5 seeds, no parameter tensor may have an identically-zero
    # gradient in every seed (dead routing would show up here)
    zero_everywhere = None
    for seed in range(5):
        net = build_network(small_config(seed=20 + seed))
        rng = np.random.default_rng(seed)
        x = Tensor(rng.random((2, 3, 16, 16), dtype=np.float32))
        target = (rng.random((2, 1, 16, 16)) > 0.8).astype(np.float32)
        for p in net.parameters():
            p.grad = None
        with Tape() as tape:
            loss = bce_loss(net.forward(x), target)
        backward(tape, loss)
        zeros = np.array([p.grad is None or not np.any(p.grad) for p in net.parameters()])
        zero_everywhere = zeros if zero_everywhere is None else (zero_everywhere & zeros)
    names = [n for (n, _), dead in zip(net.named_parameters(), zero_everywhere) if dead]
    assert names == []


def test_total_parameter_count_matches_block_sum():
    net = build_network(small_config())
    total = parameter_count(net)
    assert total == sum(p.size for p in net.parameters())
    assert total > 0


def test_save_load_roundtrip_bitwise(tmp_path):
    net = build_network(small_config(seed=33))
    net.set_mode("eval")
    x = Tensor(np.random.default_rng(3).random((1, 3, 16, 16), dtype=np.float32))
    before = net.forward(x).data
    path = tmp_path / "weights.ckpt"
    save_weights(net, path)
    loaded = load_weights(path)
    after = loaded.forward(x).data
    assert before.tobytes() == after.tobytes()


def test_truncated_checkpoint_rejected(tmp_path):
    net = build_network(small_config())
    path = tmp_path / "weights.ckpt"
    save_weights(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(CheckpointError, match="truncated"):
        load_weights(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    net = build_network(small_config())
    path = tmp_path / "weights.ckpt"
    save_weights(net, path)
    text = path.read_bytes()
    corrupted = text.replace(b"tensor head.bias 1 ", b"tensor head.bias 2 ", 1)
    path.write_bytes(corrupted)
    with pytest.raises(CheckpointError, match="head.bias"):
        load_weights(path)


def test_checkpoint_checksum_mismatch_detected(tmp_path):
    net = build_network(small_config())
    path = tmp_path / "weights.ckpt"
    save_weights(net, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF  # flip a bit inside the last buffer
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_weights(path)


def test_checkpoint_garbage_rejected(tmp_path):
    path = tmp_path / "weights.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_weights(path)


def test_running_stats_survive_roundtrip(tmp_path):
    net = build_network(small_config(seed=44))
    net.set_mode("train")
    x = Tensor(np.random.default_rng(5).random((2, 3, 16, 16), dtype=np.float32))
    net.forward(x)  # moves BN running stats off their init
    path = tmp_path / "weights.ckpt"
    save_weights(net, path)
    loaded = load_weights(path)
    for (name, arr), (name2, arr2) in zip(net.named_state(), loaded.named_state()):
        assert name == name2
        assert np.array_equal(arr.astype(np.float32), arr2.astype(np.float32)), name
