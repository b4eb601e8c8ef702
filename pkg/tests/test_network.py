import dataclasses

import numpy as np
import pytest

from ssbsn import tensor as T
from ssbsn.layers import DConvBlock, SSBlock
from ssbsn.network import (
    MAGIC, NetworkConfig, SSBSN, ablation_variant, blind_spot_probe, build_network,
    lattice_mask, load_checkpoint, parameter_count, receptive_field_probe, save_checkpoint,
)
from ssbsn.tensor import Tensor
from ssbsn.verify import probe_network


def tiny(**kw):
    return NetworkConfig(**{"channels": 4, **kw})


def test_same_seed_same_parameters():
    a, b = build_network(tiny(), 7), build_network(tiny(), 7)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    c = build_network(tiny(), 8)
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_structure_defaults():
    model = SSBSN(tiny())
    assert [p.dilation for p in model.paths] == [2, 3]
    assert [p.dhat for p in model.paths] == [4, 6]
    assert model.grid_lcm == 12
    for path in model.paths:
        kinds = [type(m) for m in path.modules]
        assert kinds == [DConvBlock] * 6 + [SSBlock] * 3
    assert len(model.layers) == 18


def test_m_zero_has_no_attention_parameters():
    model = SSBSN(tiny(m=0))
    assert not model.ss_blocks()
    assert not any("attn" in name for name, _ in model.named_parameters())
    assert model.grid_lcm == 1


def test_parameter_count_increases_with_m():
    counts = [parameter_count(SSBSN(tiny(m=m))) for m in range(10)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


@pytest.mark.parametrize("bad", [dict(channels=5), dict(channels=2), dict(m=10), dict(m=-1),
                                 dict(gamma=0), dict(kernel_sizes=(3, 4))])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        SSBSN(tiny(**bad))


def test_ablation_variants():
    base = tiny()
    off = ablation_variant(base, {"SS": False, "QK": False, "CS": False, "DF": False})
    assert all(isinstance(m, DConvBlock) for m in SSBSN(off).layers)
    baseline = SSBSN(tiny(m=0))
    assert [type(m) for m in SSBSN(off).layers] == [type(m) for m in baseline.layers]
    assert parameter_count(SSBSN(off)) == parameter_count(baseline)
    assert ablation_variant(base, {"DF": True}) == base
    first = SSBSN(ablation_variant(base, {"DF": False}))
    assert [isinstance(m, SSBlock) for m in first.paths[0].modules] == [True] * 3 + [False] * 6
    split = SSBSN(ablation_variant(base, {"QK": False}))
    assert hasattr(split.ss_blocks()[0].attn, "w_q")
    assert not SSBSN(ablation_variant(base, {"CS": False})).ss_blocks()[0].attn.cosine_similarity
    with pytest.raises(ValueError):
        ablation_variant(base, {"XX": True})


def test_forward_shape_and_divisibility(rng):
    model = SSBSN(tiny())
    assert model(Tensor(rng.normal(size=(1, 3, 24, 24)))).shape == (1, 3, 24, 24)
    with pytest.raises(ValueError):
        model(Tensor(rng.normal(size=(1, 3, 20, 24))))
    with pytest.raises(ValueError):
        model(Tensor(rng.normal(size=(1, 4, 24, 24))))


def test_zero_weight_model_output_is_constant(f64, rng):
    model = SSBSN(tiny())
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    model.tail.conv3.bias.data = np.array([0.1, 0.2, 0.3])
    out = model(Tensor(rng.normal(size=(1, 3, 24, 24)))).data
    assert out.shape == (1, 3, 24, 24)
    np.testing.assert_array_equal(out[0, :, 5, 7], [0.1, 0.2, 0.3])
    assert np.all(out == out[:, :, :1, :1])


def test_forward_matches_op_level_oracle(f64, rng):
    # m = 0: spell every path out with raw ops and compare
    model = SSBSN(tiny(m=0))
    x = Tensor(rng.normal(size=(2, 3, 12, 12)))
    feats = T.relu(T.conv1x1(x, model.head.conv.weight, model.head.conv.bias))
    outs = []
    for path in model.paths:
        m = path.masked
        y = T.relu(T.conv2d(feats, m.weight * m.mask, m.bias, 1))
        for b in path.modules:
            z = T.relu(T.conv2d(y, b.conv1.weight, b.conv1.bias, path.dilation))
            z = T.relu(T.conv2d(z, b.conv2.weight, b.conv2.bias, path.dilation))
            y = T.conv1x1(z, b.proj.weight, b.proj.bias) + y
        outs.append(y)
    t = model.tail
    y = T.relu(T.conv1x1(T.concat(outs, axis=1), t.conv1.weight, t.conv1.bias))
    y = T.relu(T.conv1x1(y, t.conv2.weight, t.conv2.bias))
    expected = T.conv1x1(y, t.conv3.weight, t.conv3.bias).data
    np.testing.assert_allclose(model(x).data, expected, rtol=1e-12, atol=1e-12)


def test_deterministic_forward(rng):
    x = Tensor(rng.normal(size=(1, 3, 12, 12)))
    a = SSBSN(tiny(seed=3))(x).data
    b = SSBSN(tiny(seed=3))(x).data
    assert np.array_equal(a, b)


def test_blind_spot_random_models(f64):
    for seed in range(4):
        model = probe_network(seed)
        rng = np.random.default_rng(seed)
        image = rng.uniform(size=(1, 3, 24, 24))
        live = 0
        for _ in range(10):
            p = tuple(int(v) for v in rng.integers(0, 24, 2))
            grad = blind_spot_probe(model, image, p)
            assert np.all(grad[0, :, p[0], p[1]] == 0)
            live += bool(np.any(grad))
        assert live >= 8


def test_path_independence(f64, rng):
    model = SSBSN(tiny())
    x = Tensor(rng.normal(size=(1, 3, 12, 12)))
    feats = model.head(x)
    before = [model.paths[0](feats).data, model.paths[1](feats).data]
    for p in model.paths[1].parameters():
        p.data = np.zeros_like(p.data)
    after = [model.paths[0](feats).data, model.paths[1](feats).data]
    assert np.array_equal(before[0], after[0])
    merged = T.concat([Tensor(after[0]), Tensor(after[1])], axis=1)
    np.testing.assert_array_equal(model(x).data, model.tail(merged).data)


@pytest.mark.parametrize("depth,d,count", [(1, 2, 9), (2, 2, 25)])
def test_receptive_field_examples(f64, rng, depth, d, count):
    from ssbsn.layers import Conv2d

    layers = [Conv2d(2, 2, 3, d, rng) for _ in range(depth)]
    mask = receptive_field_probe(layers, (1, 2, 21, 21), (10, 10), rng)
    assert mask.sum() == count
    np.testing.assert_array_equal(mask, lattice_mask((21, 21), (10, 10), d, depth))


def test_full_network_probe_excludes_centre(f64, rng):
    model = SSBSN(tiny())
    layers = [model.head, lambda x: model.paths[0](x)]
    mask = receptive_field_probe(layers, (1, 3, 24, 24), (12, 12), rng)
    assert not mask[12, 12]
    assert mask.sum() > 1


def test_checkpoint_round_trip(tmp_path, rng):
    model = SSBSN(tiny(m=2, qk_integration=False, seed=11))
    path = tmp_path / "m.ssbsn"
    save_checkpoint(path, model, {"step": 5, "epoch": 0})
    blob = path.read_bytes()
    assert blob.startswith(MAGIC)
    loaded, state = load_checkpoint(path)
    assert loaded.config == model.config
    assert state == {"step": "5", "epoch": "0"}
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(p.data, q.data)
    x = Tensor(rng.normal(size=(1, 3, 12, 12)))
    assert np.array_equal(model(x).data, loaded(x).data)
    save_checkpoint(tmp_path / "again.ssbsn", loaded, {"step": 5, "epoch": 0})
    assert (tmp_path / "again.ssbsn").read_bytes() == blob


def test_checkpoint_layout(tmp_path):
    import struct

    model = SSBSN(tiny(m=0))
    path = tmp_path / "m.ssbsn"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    (n,) = struct.unpack_from("<I", blob, len(MAGIC))
    offset = len(MAGIC) + 4 + n
    first = model.parameters()[0]
    rank, *dims = struct.unpack_from(f"<{1 + first.ndim}I", blob, offset)
    assert rank == first.ndim and tuple(dims) == first.shape
    data = np.frombuffer(blob, "<f4", count=first.data.size, offset=offset + 4 * (1 + rank))
    assert np.array_equal(data.reshape(first.shape), first.data)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ssbsn"
    bad.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_full_scale_preset():
    cfg = NetworkConfig.full_scale()
    assert cfg.channels == 128 and cfg.m == 3 and cfg.gamma == 2
    assert dataclasses.replace(cfg, channels=32) == NetworkConfig()
