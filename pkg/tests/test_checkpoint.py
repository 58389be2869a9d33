"""Bit-exact serialization round-trips for checkpoints and states."""

import json

import numpy as np
import pytest

from ewcdet.checkpoint import (CheckpointError, load_checkpoint,
                               load_consolidation, save_checkpoint,
                               save_consolidation, vector_hash)
from ewcdet.consolidation import ConsolidationState
from ewcdet.detector import init_params

from conftest import MINI_ARCH, MINI_CONFIG


def awkward_values(k, seed=0):
    """Vector with signed zeros, denormals, and extreme exponents."""
    v = np.random.default_rng(seed).normal(size=k)
    v[0] = -0.0
    v[1] = 0.0
    v[2] = 5e-324          # smallest denormal
    v[3] = -1.7976931348623157e308
    v[4] = 2.2250738585072014e-308
    return v


class TestCheckpointRoundTrip:
    def test_bit_exact(self, tmp_path):
        p = init_params(3, MINI_ARCH).with_values(awkward_values(init_params(3, MINI_ARCH).k))
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(path, p, MINI_CONFIG, seed=3, phase="train_a")
        back = load_checkpoint(path)
        assert back.params.values.tobytes() == p.values.tobytes()
        assert back.params.layout == p.layout
        assert back.anchor_config == MINI_CONFIG
        assert back.seed == 3 and back.phase == "train_a"
        assert vector_hash(back.params.values) == vector_hash(p.values)

    def test_save_is_deterministic(self, tmp_path):
        p = init_params(4, MINI_ARCH)
        save_checkpoint(tmp_path / "a.json", p, MINI_CONFIG, 4, "x")
        save_checkpoint(tmp_path / "b.json", p, MINI_CONFIG, 4, "x")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        p = init_params(0, MINI_ARCH)
        path = tmp_path / "m.json"
        save_checkpoint(path, p, MINI_CONFIG, 0, "x")
        doc = json.loads(path.read_text())
        doc["format_version"] = 2
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        p = init_params(0, MINI_ARCH)
        path = tmp_path / "m.json"
        save_checkpoint(path, p, MINI_CONFIG, 0, "x")
        path.write_text(path.read_text()[:100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_kind_rejected(self, tmp_path):
        st = ConsolidationState(np.zeros(4), np.ones(4), 1.0, "A", 2)
        save_consolidation(tmp_path / "s.json", st)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "s.json")

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.json")


class TestConsolidationRoundTrip:
    def test_bit_exact(self, tmp_path):
        snap = awkward_values(32, seed=1)
        fisher = np.abs(awkward_values(32, seed=2))
        st = ConsolidationState(snap, fisher, lam=1.25e-6,
                                source_dataset_id="A", sample_count=24)
        save_consolidation(tmp_path / "s.json", st)
        back = load_consolidation(tmp_path / "s.json")
        assert back.snapshot.tobytes() == st.snapshot.tobytes()
        assert back.fisher.tobytes() == st.fisher.tobytes()
        assert back.lam == st.lam
        assert back.source_dataset_id == "A"
        assert back.sample_count == 24
        assert back.mode == "squared"

    def test_as_printed_mode_roundtrip(self, tmp_path):
        st = ConsolidationState(np.zeros(3), np.array([-1.0, 0.0, 2.0]), 0.5,
                                "B", 5, mode="as_printed")
        save_consolidation(tmp_path / "s.json", st)
        assert load_consolidation(tmp_path / "s.json").mode == "as_printed"

    def test_corrupt_payload_rejected(self, tmp_path):
        st = ConsolidationState(np.zeros(4), np.ones(4), 1.0, "A", 2)
        path = tmp_path / "s.json"
        save_consolidation(path, st)
        doc = json.loads(path.read_text())
        doc["fisher"] = doc["fisher"][:-8]
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError):
            load_consolidation(path)


class TestVectorHash:
    def test_distinguishes_zero_signs(self):
        assert vector_hash(np.array([0.0])) != vector_hash(np.array([-0.0]))

    def test_stable(self):
        v = np.random.default_rng(0).normal(size=10)
        assert vector_hash(v) == vector_hash(v.copy())
