"""Checkpoint format tests: round-trips, corruption detection, model glue."""

import struct

import numpy as np
import pytest

from flowcast.autodiff import Tensor
from flowcast.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from flowcast.errors import FormatError
from flowcast.forecaster import ForecastModel
from flowcast.trainer import load_model_state, model_state


def sample_checkpoint():
    rng = np.random.default_rng(0)
    params = {
        "flow.conv1.w": rng.normal(size=(4, 6, 3, 3)).astype(np.float32),
        "flow.conv1.b": rng.normal(size=(4,)).astype(np.float32),
        "head.w": rng.normal(size=(2, 4, 1, 1)).astype(np.float32),
    }
    velocity = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()}
    return Checkpoint(params, velocity, iteration=1234, config_text="seed = 7\nchannels = 8\n")


class TestRoundTrip:
    def test_full_round_trip_is_bit_exact(self, tmp_path):
        ck = sample_checkpoint()
        path = tmp_path / "model.fckp"
        save_checkpoint(path, ck)
        back = load_checkpoint(path)
        assert back.iteration == 1234
        assert back.config_text == ck.config_text
        assert set(back.params) == set(ck.params)
        for k in ck.params:
            assert back.params[k].dtype == np.float32
            np.testing.assert_array_equal(back.params[k], ck.params[k])
        for k in ck.velocity:
            np.testing.assert_array_equal(back.velocity[k], ck.velocity[k])

    def test_empty_sections(self, tmp_path):
        path = tmp_path / "empty.fckp"
        save_checkpoint(path, Checkpoint())
        back = load_checkpoint(path)
        assert back.params == {} and back.velocity == {}
        assert back.iteration == 0 and back.config_text == ""

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.fckp"
        save_checkpoint(path, Checkpoint(iteration=5))
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<I", raw[4:8])[0] == FORMAT_VERSION


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fckp"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.fckp"
        path.write_bytes(MAGIC + struct.pack("<I", 9) + b"\x00" * 8)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_payload_names_offset(self, tmp_path):
        ck = sample_checkpoint()
        path = tmp_path / "t.fckp"
        save_checkpoint(path, ck)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(path)

    def test_duplicate_entry_rejected(self, tmp_path):
        name = b"p"
        entry = struct.pack("<I", 1) + name + struct.pack("<II", 1, 1) + struct.pack("<f", 0.5)
        body = (
            MAGIC
            + struct.pack("<I", FORMAT_VERSION)
            + struct.pack("<I", 2)
            + entry
            + entry
            + struct.pack("<I", 0)
            + struct.pack("<Q", 0)
        )
        path = tmp_path / "dup.fckp"
        path.write_bytes(body)
        with pytest.raises(FormatError, match="duplicate"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.fckp"
        save_checkpoint(path, Checkpoint())
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)


class TestModelGlue:
    def test_state_transplant_reproduces_forward_outputs(self, tmp_path):
        src = ForecastModel(num_classes=4, channels=8, seed=1)
        # make the transplant observable: give the flow head nonzero weights
        src.head.w.data[...] = 0.05
        dst = ForecastModel(num_classes=4, channels=8, seed=2)
        path = tmp_path / "m.fckp"
        save_checkpoint(path, Checkpoint(params=model_state(src)))
        load_model_state(dst, load_checkpoint(path).params)

        rng = np.random.default_rng(3)
        a = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        b = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
        fa, qa = src.flow_net.forward(a, b)
        fb, qb = dst.flow_net.forward(a, b)
        np.testing.assert_array_equal(fa.data, fb.data)
        np.testing.assert_array_equal(qa.data, qb.data)
        np.testing.assert_array_equal(src.head.w.data, dst.head.w.data)

    def test_missing_and_extra_keys_rejected(self):
        model = ForecastModel(num_classes=4, channels=8)
        state = model_state(model)
        state.pop("head.w")
        with pytest.raises(FormatError, match="head.w"):
            load_model_state(model, state)
        state = model_state(model)
        state["bogus"] = np.zeros(3, np.float32)
        with pytest.raises(FormatError, match="bogus"):
            load_model_state(model, state)

    def test_shape_mismatch_rejected(self):
        model = ForecastModel(num_classes=4, channels=8)
        state = model_state(model)
        state["head.w"] = np.zeros((2, 4, 1, 1), np.float32)  # model has 8 channels
        with pytest.raises(FormatError, match="shape"):
            load_model_state(model, state)
