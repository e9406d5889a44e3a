import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from flat.errors import CheckpointError
from flat.model import (
    CompressedDecoderWeights,
    ModelConfig,
    load_checkpoint,
    random_model,
    save_checkpoint,
)

DATA = Path(__file__).parent / "data"


def assert_bit_identical(a, b):
    assert len(a) == len(b)
    for wa, wb in zip(a, b):
        ta, tb = wa.tensors(), wb.tensors()
        assert ta.keys() == tb.keys()
        for name in ta:
            assert ta[name].dtype == tb[name].dtype == np.float64
            assert ta[name].tobytes() == tb[name].tobytes(), name


class TestConfig:
    def test_valid(self):
        c = ModelConfig(d_hid=64, d_head=16, n_q_heads=4, n_kv_heads=2, d_int=128, n_layers=2)
        assert c.group_size == 2
        assert [c.kv_head(h) for h in range(4)] == [0, 0, 1, 1]

    @pytest.mark.parametrize("kwargs", [
        dict(d_hid=60, d_head=16, n_q_heads=4, n_kv_heads=2, d_int=8, n_layers=1),
        dict(d_hid=48, d_head=16, n_q_heads=3, n_kv_heads=2, d_int=8, n_layers=1),
        dict(d_hid=16, d_head=16, n_q_heads=1, n_kv_heads=1, d_int=8, n_layers=0),
        dict(d_hid=16, d_head=16, n_q_heads=1, n_kv_heads=1, d_int=0, n_layers=1),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestRandomModel:
    def test_same_seed_identical(self, gqa_config):
        assert_bit_identical(random_model(gqa_config, 3), random_model(gqa_config, 3))

    def test_different_seed_differs(self, gqa_config):
        a, b = random_model(gqa_config, 3), random_model(gqa_config, 4)
        assert not np.array_equal(a[0].w_q, b[0].w_q)

    def test_seed0_small(self):
        c = ModelConfig(d_hid=8, d_head=4, n_q_heads=2, n_kv_heads=1, d_int=16, n_layers=2)
        layers = random_model(c, 0)
        for l, w in enumerate(layers):
            w.validate(c, l)

    def test_scale(self):
        c = ModelConfig(d_hid=256, d_head=32, n_q_heads=8, n_kv_heads=8, d_int=256, n_layers=1)
        w = random_model(c, 0)[0]
        assert abs(w.w_q.std() * np.sqrt(256) - 1.0) < 0.02
        assert abs(w.w_q.mean()) < 0.01


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path / "m")
        config, layers = load_checkpoint(tmp_path / "m")
        assert config == gqa_config
        assert config.n_layers == 3
        assert_bit_identical(gqa_model, layers)

    def test_wrong_byte_length(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path)
        f = tmp_path / "layers.0.w_q.bin"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="shape mismatch.*layers.0.w_q"):
            load_checkpoint(tmp_path)

    def test_declared_shape_disagrees_with_config(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["config"]["d_hid"] = 64
        m["config"]["d_head"] = 16
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(CheckpointError, match="shape mismatch for w_q in layer 0"):
            load_checkpoint(tmp_path)

    def test_nan_rejected(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path)
        f = tmp_path / "layers.1.w_up.bin"
        arr = np.frombuffer(f.read_bytes(), dtype="<f8").copy()
        arr[5] = np.nan
        f.write_bytes(arr.tobytes())
        with pytest.raises(CheckpointError, match="non-finite.*layers.1.w_up"):
            load_checkpoint(tmp_path)

    def test_missing_file(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path)
        (tmp_path / "layers.2.w_o.bin").unlink()
        with pytest.raises(CheckpointError, match="layers.2.w_o"):
            load_checkpoint(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path)

    def test_unwritable_target(self, tmp_path, gqa_config, gqa_model):
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        with pytest.raises(CheckpointError, match="cannot write"):
            save_checkpoint(gqa_config, gqa_model, blocker / "sub")

    def test_invalid_weights_not_saved(self, tmp_path, gqa_config, gqa_model):
        gqa_model[1].w_v[0, 0] = np.inf
        with pytest.raises(CheckpointError, match="non-finite value in w_v in layer 1"):
            save_checkpoint(gqa_config, gqa_model, tmp_path)

    def test_f32_export_is_lossy_but_loadable(self, tmp_path, gqa_config, gqa_model):
        save_checkpoint(gqa_config, gqa_model, tmp_path, dtype="f32")
        _, layers = load_checkpoint(tmp_path)
        assert layers[0].w_q.dtype == np.float64
        np.testing.assert_allclose(layers[0].w_q, gqa_model[0].w_q, rtol=1e-6)
        assert (tmp_path / "layers.0.w_q.bin").stat().st_size == gqa_model[0].w_q.size * 4

    def test_compressed_roundtrip_records_ranks(self, tmp_path, gqa_config):
        from conftest import make_batches
        from flat.compress import compress_model
        from flat.forward import run_calibration
        from flat.iprs import make_plan

        layers = random_model(gqa_config, 5)
        cap = run_calibration(layers, make_batches(1, 2, 32, gqa_config.d_hid), gqa_config)
        plan = make_plan([0.5, 0.1, 0.3], 0.4, gqa_config, "iprs")
        assert len(set(plan.ranks_attn.tolist())) > 1
        comp = compress_model(layers, cap, plan, gqa_config, qk=True)
        save_checkpoint(gqa_config, comp, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert [m["retained_rank"] for m in manifest["layers"]] == plan.ranks_attn.tolist()
        assert [m["retained_mlp"] for m in manifest["layers"]] == plan.ranks_mlp.tolist()
        assert any(t["name"] == "layers.0.q_basis" for t in manifest["tensors"])
        _, loaded = load_checkpoint(tmp_path)
        assert all(isinstance(w, CompressedDecoderWeights) for w in loaded)
        assert [w.retained_rank for w in loaded] == plan.ranks_attn.tolist()
        np.testing.assert_array_equal(loaded[1].mlp_indices, comp[1].mlp_indices)
        assert_bit_identical(comp, loaded)

    def test_golden_manifest(self, tmp_path):
        config = ModelConfig(d_hid=4, d_head=2, n_q_heads=2, n_kv_heads=1, d_int=3, n_layers=1)
        save_checkpoint(config, random_model(config, 0), tmp_path)
        got = json.loads((tmp_path / "manifest.json").read_text())
        expected = json.loads((DATA / "golden_manifest.json").read_text())
        assert got == expected


@st.composite
def configs(draw):
    d_head = draw(st.integers(1, 4))
    G = draw(st.integers(1, 3))
    n = draw(st.integers(1, 3))
    return ModelConfig(
        d_hid=G * n * d_head, d_head=d_head, n_q_heads=G * n, n_kv_heads=G,
        d_int=draw(st.integers(1, 8)), n_layers=draw(st.integers(1, 3)),
        norm_eps=draw(st.sampled_from([1e-6, 1e-5, 0.1])),
    )


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(config=configs(), seed=st.integers(0, 2**32 - 1))
def test_roundtrip_property(tmp_path_factory, config, seed):
    path = tmp_path_factory.mktemp("ckpt")
    layers = random_model(config, seed)
    save_checkpoint(config, layers, path)
    loaded_config, loaded = load_checkpoint(path)
    assert loaded_config == config
    assert_bit_identical(layers, loaded)
