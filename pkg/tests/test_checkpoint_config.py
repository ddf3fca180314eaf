import json

import numpy as np
import pytest

from tirtrack import checkpoint
from tirtrack.cfgb import DccfgConfig
from tirtrack.checkpoint import CheckpointError
from tirtrack.config import RunConfig, apply_overrides, dumps, from_dict, load, to_dict
from tirtrack.rng import stream


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        state = {"b.w": rng.normal(size=(3, 4)), "a": np.arange(5.0), "s": np.array(2.5)}
        path = checkpoint.save(tmp_path / "ck", state, {"k": 1})
        back, cfg = checkpoint.load(path)
        assert cfg == {"k": 1} and back.keys() == state.keys()
        assert all(np.array_equal(back[k], state[k]) and back[k].shape == state[k].shape for k in state)

    def test_blob_layout_is_little_endian_float64_in_manifest_order(self, tmp_path):
        checkpoint.save(tmp_path / "ck", {"b": np.array([3.0]), "a": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "ck.bin").read_bytes()
        assert np.frombuffer(raw, dtype="<f8").tolist() == [1.0, 2.0, 3.0]
        manifest = json.loads((tmp_path / "ck.json").read_text())
        assert [e["name"] for e in manifest["tensors"]] == ["a", "b"]
        assert manifest["tensors"][1]["offset"] == 2

    def test_load_accepts_stem(self, tmp_path):
        checkpoint.save(tmp_path / "ck", {"a": np.ones(2)})
        assert np.array_equal(checkpoint.load(tmp_path / "ck")[0]["a"], np.ones(2))

    def test_missing_or_corrupt(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "none.json")
        checkpoint.save(tmp_path / "ck", {"a": np.ones(4)})
        (tmp_path / "ck.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "ck.json")
        (tmp_path / "ck.bin").unlink()
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "ck.json")
        (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "x.json")


class TestRunConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(steps=7, lr=0.5)
        path = tmp_path / "c.json"
        path.write_text(dumps(cfg))
        back = load(path)
        assert back == cfg and isinstance(back.tracker.dccfg, DccfgConfig)

    def test_overrides(self):
        cfg = apply_overrides(RunConfig(), ["steps=3", "tracker.dccfg.n_groups=4", "loss.use_dcfg_loss=false",
                                            "out_dir=runs/x"])
        assert cfg.steps == 3 and cfg.tracker.dccfg.n_groups == 4
        assert cfg.loss.use_dcfg_loss is False and cfg.out_dir == "runs/x"

    @pytest.mark.parametrize("item", ["nokey", "bogus=1", "tracker.bogus=1", "steps.x=1"])
    def test_bad_overrides(self, item):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), [item])

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["steps=-1"])
        with pytest.raises(ValueError):
            from_dict({**to_dict(RunConfig()), "batch_size": 0})

    def test_defaults_use_chosen_operating_point(self):
        cfg = RunConfig()
        assert cfg.tracker.dccfg.n_groups == 8 and cfg.tracker.dccfg.alpha == 0.7
        assert cfg.tracker.dccfg.groups == 8 and cfg.loss.mu == 4.0


class TestRng:
    def test_streams_reproducible_and_independent(self):
        a = stream(1, "x", 2).random(4)
        assert np.array_equal(a, stream(1, "x", 2).random(4))
        assert not np.array_equal(a, stream(1, "y", 2).random(4))
        assert not np.array_equal(a, stream(2, "x", 2).random(4))

    def test_uses_philox(self):
        assert isinstance(stream(0).bit_generator, np.random.Philox)
