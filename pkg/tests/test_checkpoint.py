#!/usr/bin/env python3
"""
Tests for the TAMO checkpoint container
"""

import os
import struct
import tempfile
import unittest

import numpy as np

from task_aware_moe.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from task_aware_moe.errors import CheckpointError
from task_aware_moe.moe_layer import MoEConfig
from task_aware_moe.transformer import ModelConfig, forward, init_model


class TestCheckpoint(unittest.TestCase):
    """Test cases for save_checkpoint / load_checkpoint"""

    def setUp(self):
        """Set up a scratch directory and a seeded generator"""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.rng = np.random.default_rng(1234)

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def write_raw(self, name, data):
        with open(self.path(name), "wb") as f:
            f.write(data)
        return self.path(name)

    def read_raw(self, name):
        with open(self.path(name), "rb") as f:
            return f.read()

    def test_round_trip_is_bit_exact(self):
        """Values, shapes and key set survive unchanged"""
        state = {
            "scalar": np.array(0.2),
            "vector": self.rng.normal(size=7),
            "matrix": self.rng.normal(size=(3, 5)) * 1e-300,
            "blocks.0.attn.wq": self.rng.normal(size=(4, 4)),
        }
        save_checkpoint(self.path("state.tamo"), state)
        loaded = load_checkpoint(self.path("state.tamo"))
        self.assertEqual(sorted(loaded), sorted(state))
        for key, value in state.items():
            self.assertEqual(loaded[key].shape, value.shape)
            self.assertEqual(loaded[key].tobytes(), value.tobytes())

    def test_header_layout(self):
        """Magic, version, count, then name/shape/payload per entry"""
        save_checkpoint(self.path("one.tamo"), {"ab": np.array([1.5, -2.0])})
        raw = self.read_raw("one.tamo")
        self.assertEqual(raw[:4], MAGIC)
        self.assertEqual(struct.unpack("<BI", raw[4:9]), (VERSION, 1))
        self.assertEqual(struct.unpack("<H", raw[9:11]), (2,))
        self.assertEqual(raw[11:13], b"ab")
        self.assertEqual(struct.unpack("<B", raw[13:14]), (1,))
        self.assertEqual(struct.unpack("<I", raw[14:18]), (2,))
        self.assertEqual(struct.unpack("<2d", raw[18:34]), (1.5, -2.0))
        self.assertEqual(len(raw), 34)

    def test_entries_are_sorted(self):
        save_checkpoint(self.path("order.tamo"), {"b": np.zeros(1), "a": np.zeros(1)})
        raw = self.read_raw("order.tamo")
        self.assertEqual(raw[11:12], b"a")

    def test_empty_state(self):
        save_checkpoint(self.path("empty.tamo"), {})
        self.assertEqual(load_checkpoint(self.path("empty.tamo")), {})

    def test_model_round_trip_preserves_logits(self):
        """A reloaded model produces identical logits"""
        cfg = ModelConfig(vocab_size=36, max_len=32, d_model=16, d_hidden=24, n_layers=2, n_heads=2, init_std=0.1)
        model = init_model(cfg, self.rng, MoEConfig())
        save_checkpoint(self.path("model.tamo"), model.state_dict())
        restored = init_model(cfg, np.random.default_rng(5), MoEConfig())
        restored.load_state_dict(load_checkpoint(self.path("model.tamo")))
        seqs = [[1, 2, 3]]
        np.testing.assert_array_equal(forward(model, seqs).logits.data, forward(restored, seqs).logits.data)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path("absent.tamo"))

    def test_bad_magic(self):
        path = self.write_raw("bad.tamo", b"NOPE" + bytes(5))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_version(self):
        path = self.write_raw("v9.tamo", MAGIC + struct.pack("<BI", 9, 0))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self):
        save_checkpoint(self.path("cut.tamo"), {"w": np.ones((4, 4))})
        path = self.write_raw("cut.tamo", self.read_raw("cut.tamo")[:-8])
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self):
        save_checkpoint(self.path("long.tamo"), {"w": np.ones(2)})
        path = self.write_raw("long.tamo", self.read_raw("long.tamo") + b"\x00")
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_unwritable_location(self):
        blocker = self.write_raw("file", b"")
        with self.assertRaises(CheckpointError):
            save_checkpoint(os.path.join(blocker, "inside.tamo"), {"w": np.ones(1)})


if __name__ == '__main__':
    unittest.main()
