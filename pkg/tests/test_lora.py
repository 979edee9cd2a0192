import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgen.errors import CheckpointError, ConfigError, ShapeError
from fedgen.linalg import make_rng, matmul
from fedgen.lora import (LoraAdapter, LoraConfig, LoraPair, adapter_axpy, count_for_shapes, deserialize_adapter,
                         init_adapter, load_adapter, lora_delta, lora_forward, merge_adapter, param_count,
                         payload_size, save_adapter, serialize_adapter)


def reference_shapes(n_layers=6, d=768):
    return {f"layers.{i}.attn.{p}": (d, d) for i in range(n_layers) for p in ("wq", "wv")}


def small_adapter(seed=0):
    shapes = {"a": (6, 5), "b": (4, 7)}
    cfg = LoraConfig(rank=3, scaling=6.0, target_layers=("a", "b"))
    r = make_rng(seed)
    return LoraAdapter(cfg, {n: LoraPair(r.standard_normal((3, s[1])), r.standard_normal((s[0], 3)))
                             for n, s in shapes.items()})


def test_fresh_adapter_has_zero_delta():
    shapes = {"a": (6, 5), "b": (4, 7)}
    adapter = init_adapter(LoraConfig(2, 16.0, ("a", "b")), shapes, make_rng(0))
    for name, pair in adapter.pairs.items():
        np.testing.assert_array_equal(lora_delta(pair), np.zeros(shapes[name]))
        assert pair.down.std() > 0


def test_param_count_single_full_size_layer():
    cfg = LoraConfig(8, 16.0, ("w",))
    adapter = init_adapter(cfg, {"w": (768, 768)}, make_rng(0))
    assert param_count(adapter) == 8 * (768 + 768) == 12_288


def test_param_count_full_size_configuration():
    shapes = reference_shapes()
    cfg = LoraConfig(8, 16.0, tuple(shapes))
    assert count_for_shapes(cfg, shapes) == 6 * 2 * 8 * (768 + 768) == 147_456


def test_param_count_small_cases():
    assert param_count(LoraAdapter(LoraConfig(4, 1.0, ()), {})) == 0
    adapter = init_adapter(LoraConfig(4, 1.0, ("w",)), {"w": (64, 64)}, make_rng(0))
    assert param_count(adapter) == 512


def test_init_is_deterministic():
    shapes = {"a": (6, 5)}
    cfg = LoraConfig(2, 16.0, ("a",))
    a = serialize_adapter(init_adapter(cfg, shapes, make_rng(9)), 64)
    b = serialize_adapter(init_adapter(cfg, shapes, make_rng(9)), 64)
    assert a == b


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown target"):
        LoraConfig(2, 1.0, ("missing",)).check_shapes({"a": (4, 4)})
    with pytest.raises(ConfigError, match="rank 4"):
        LoraConfig(4, 1.0, ("a",)).check_shapes({"a": (4, 9)})
    with pytest.raises(ConfigError, match="non-empty"):
        LoraConfig(2, 1.0, ()).check_shapes({"a": (4, 4)})
    with pytest.raises(ConfigError) as err:
        LoraConfig(0, -1.0)
    assert len(err.value.problems) == 2


def test_forward_hand_example():
    pair = LoraPair(np.array([[1.0, 1.0]]), np.array([[1.0], [1.0]]))
    out = lora_forward(np.array([[1.0], [2.0]]), np.eye(2), pair, scaling=1.0)
    np.testing.assert_array_equal(out, [[4.0], [5.0]])
    np.testing.assert_array_equal(merge_adapter(np.eye(2), pair, 1.0), [[2.0, 1.0], [1.0, 2.0]])


def test_zero_pair_is_inert(rng):
    w0 = rng.standard_normal((4, 3))
    x = rng.standard_normal((3, 5))
    pair = LoraPair(rng.standard_normal((2, 3)), np.zeros((4, 2)))
    np.testing.assert_array_equal(lora_forward(x, w0, pair, 16.0), w0 @ x)
    np.testing.assert_array_equal(merge_adapter(w0, pair, 16.0), w0)


def test_forward_and_merge_do_not_mutate(rng):
    w0 = rng.standard_normal((4, 3))
    keep = w0.copy()
    pair = LoraPair(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))
    lora_forward(rng.standard_normal((3, 1)), w0, pair, 2.0)
    merge_adapter(w0, pair, 2.0)
    np.testing.assert_array_equal(w0, keep)


def test_merge_then_unmerge_recovers(rng):
    w0 = rng.standard_normal((5, 4))
    pair = LoraPair(rng.standard_normal((2, 4)), rng.standard_normal((5, 2)))
    merged = merge_adapter(w0, pair, 16.0)
    np.testing.assert_allclose(merged - (16.0 / 2) * lora_delta(pair), w0, atol=1e-12, rtol=0)


def test_shape_errors(rng):
    pair = LoraPair(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))
    with pytest.raises(ShapeError):
        lora_forward(rng.standard_normal((3, 1)), rng.standard_normal((5, 3)), pair, 1.0)
    with pytest.raises(ShapeError):
        lora_forward(rng.standard_normal((2, 1)), rng.standard_normal((4, 3)), pair, 1.0)
    with pytest.raises(ShapeError):
        merge_adapter(rng.standard_normal((4, 3)), LoraPair(pair.down, rng.standard_normal((4, 1))), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 4), st.integers(1, 4),
       st.floats(0.1, 32.0), st.integers(0, 2 ** 32 - 1))
def test_runtime_matches_merged(d, k, r, n, scaling, seed):
    g = np.random.default_rng(seed)
    w0 = g.standard_normal((d, k))
    pair = LoraPair(g.standard_normal((r, k)), g.standard_normal((d, r)))
    x = g.standard_normal((k, n))
    runtime = lora_forward(x, w0, pair, scaling)
    merged = matmul(merge_adapter(w0, pair, scaling), x)
    np.testing.assert_allclose(runtime, merged, rtol=1e-10, atol=1e-10 * np.abs(merged).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_param_count_independent_of_values(seed):
    a = small_adapter(seed)
    zeroed = adapter_axpy(a, a, -1.0)
    assert param_count(a) == param_count(zeroed) == 3 * (6 + 5) + 3 * (4 + 7)


def test_axpy_identities():
    a = small_adapter(1)
    b = small_adapter(2)
    assert adapter_axpy(a, b, 0.0).allclose(a)
    assert adapter_axpy(adapter_axpy(a, a, -1.0), a, 1.0).allclose(a)
    zero = adapter_axpy(a, a, -1.0)
    assert all(not p.down.any() and not p.up.any() for p in zero.pairs.values())
    other = LoraAdapter(a.config, {"a": a.pairs["a"]})
    with pytest.raises(ShapeError):
        adapter_axpy(a, other, 1.0)


def test_wire_payload_is_four_bytes_per_parameter():
    a = small_adapter()
    assert payload_size(serialize_adapter(a, 32)) == 4 * param_count(a)
    assert payload_size(serialize_adapter(a, 64)) == 8 * param_count(a)


def test_serialization_round_trip(tmp_path):
    a = small_adapter()
    back = deserialize_adapter(serialize_adapter(a, 64))
    assert back.allclose(a) and back.config == a.config
    low = deserialize_adapter(serialize_adapter(a, 32))
    for name in a.pairs:
        np.testing.assert_array_equal(low.pairs[name].up, a.pairs[name].up.astype(np.float32))
    path = save_adapter(a, tmp_path / "a.fgla")
    assert load_adapter(path).allclose(a)


def test_corrupt_blobs_rejected():
    blob = serialize_adapter(small_adapter(), 32)
    with pytest.raises(CheckpointError):
        deserialize_adapter(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        deserialize_adapter(blob[:-4])
    with pytest.raises(CheckpointError):
        deserialize_adapter(blob + b"\0")
