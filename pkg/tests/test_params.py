import struct

import numpy as np
import pytest

from perturblab import checkpoint
from perturblab.checkpoint import BadMagic, ManifestMismatch, TruncatedPayload
from perturblab.network import LayerSpec, Model, ModelSpec, default_spec, forward, init_model
from perturblab.params import ParamStore, layer_stats, param_count


def tiny_model(w):
    spec = ModelSpec((LayerSpec("gap", "gap"), LayerSpec("dense", "dense", 0, 2, 1)), (1, 1, 2))
    return Model(spec, ParamStore({("dense", "weights"): np.array(w, np.float32).reshape(2, 1),
                                   ("dense", "bias"): np.zeros(1, np.float32)}))


def test_round_trip_is_bit_exact(tmp_path, fresh_model, small_split):
    path = tmp_path / "m.plab"
    checkpoint.save(fresh_model, path)
    back = checkpoint.load(path)
    assert back.spec == fresh_model.spec
    assert back.params.equal_bits(fresh_model.params)
    x = small_split.images[:32]
    assert forward(back, x).tobytes() == forward(fresh_model, x).tobytes()


def test_save_is_byte_deterministic(fresh_model):
    assert checkpoint.to_bytes(fresh_model) == checkpoint.to_bytes(fresh_model.copy())
    assert checkpoint.to_bytes(fresh_model).startswith(b"PLAB1")


def test_bad_magic(tmp_path, fresh_model):
    p = tmp_path / "x.plab"
    p.write_bytes(b"XXXX" + checkpoint.to_bytes(fresh_model)[5:])
    with pytest.raises(BadMagic, match="bad magic"):
        checkpoint.load(p)


def test_truncated_payload():
    buf = checkpoint.to_bytes(tiny_model([1.0, -1.0]))
    # manifest: 2 weights + 1 bias = 3 floats; drop the last one
    with pytest.raises(TruncatedPayload, match="truncated payload"):
        checkpoint.from_bytes(buf[:-4])


def _raw(header: dict, n_floats: int) -> bytes:
    import json
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"PLAB1" + struct.pack("<Q", len(h)) + h + np.zeros(n_floats, "<f4").tobytes()


def test_ten_declared_nine_present():
    spec = ModelSpec((LayerSpec("gap", "gap"), LayerSpec("dense", "dense", 0, 3, 3)), (1, 1, 3))
    entries = [{"layer": "dense", "role": "weights", "shape": [3, 3], "offset": 0, "count": 9},
               {"layer": "dense", "role": "bias", "shape": [1], "offset": 36, "count": 1}]
    # the bias entry is 1 float short of the 3 the ModelSpec wants, but the payload check fires first:
    # 10 floats declared in total, only 9 written
    with pytest.raises(TruncatedPayload, match="truncated payload"):
        checkpoint.from_bytes(_raw({"spec": spec.to_dict(), "entries": entries}, 9))


def test_manifest_shape_mismatch():
    spec = ModelSpec((LayerSpec("gap", "gap"), LayerSpec("dense", "dense", 0, 2, 1)), (1, 1, 2))
    entries = [{"layer": "dense", "role": "weights", "shape": [1, 2], "offset": 0, "count": 2},
               {"layer": "dense", "role": "bias", "shape": [1], "offset": 8, "count": 1}]
    with pytest.raises(ManifestMismatch):
        checkpoint.from_bytes(_raw({"spec": spec.to_dict(), "entries": entries}, 3))
    entries[0]["count"] = 3
    with pytest.raises(ManifestMismatch):
        checkpoint.from_bytes(_raw({"spec": spec.to_dict(), "entries": entries}, 4))


def test_layer_stats_plus_minus_one():
    [s] = layer_stats(tiny_model([1.0, -1.0]))
    assert (s.layer_name, s.mean, s.std, s.count) == ("dense", 0.0, 1.0, 2)


def test_param_count_closed_form():
    expected_w = 9 * (1 * 8 + 8 * 16 + 16 * 16 + 16 * 8) + 8 * 2
    expected_b = 8 + 16 + 16 + 8 + 2
    counts = param_count(init_model(default_spec(), 0))
    assert counts == {"weights": expected_w, "bias": expected_b, "total": expected_w + expected_b}


def test_param_count_no_layers():
    empty = Model(ModelSpec((LayerSpec("gap", "gap"),), (4, 4, 2)), ParamStore())
    assert param_count(empty) == {"weights": 0, "bias": 0, "total": 0}
    assert layer_stats(empty) == []


def test_stats_counts_sum_to_weights(fresh_model):
    assert sum(s.count for s in layer_stats(fresh_model)) == param_count(fresh_model)["weights"]


def test_clone_does_not_alias(fresh_model):
    c = fresh_model.params.clone()
    c["conv1", "weights"][0, 0, 0, 0] += 1
    assert not c.equal_bits(fresh_model.params)


def test_unknown_role_rejected():
    with pytest.raises(ValueError, match="role"):
        ParamStore()["conv1", "gamma"] = np.zeros(1)


def test_trained_first_conv_wider_than_last(trained_model):
    stats = {s.layer_name: s.std for s in layer_stats(trained_model)}
    assert stats["conv1"] > stats["conv4"]
