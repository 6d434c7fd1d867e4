import json
import struct

import pytest
import torch

from amieod.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CorruptCheckpointError,
    UnsupportedVersionError,
    collect_state,
    load_checkpoint,
    restore_state,
    save_checkpoint,
)
from amieod.config import RunConfig
from amieod.detector import SingleScaleDetector
from amieod.enhance import ExpertBundle


def make_checkpoint():
    torch.manual_seed(0)
    experts = ExpertBundle(curve_width=8, pp_input_size=32)
    detector = SingleScaleDetector(RunConfig().detector)
    tensors = collect_state(experts=experts, detector=detector)
    return Checkpoint(config=RunConfig().to_dict(), stage=1, epoch=2, tensors=tensors,
                      rng_state=torch.get_rng_state().numpy().tobytes()), experts, detector


class TestRoundTrip:
    def test_bit_exact_tensors(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.stage == 1 and back.epoch == 2
        assert back.config == ckpt.config
        assert back.rng_state == ckpt.rng_state
        assert set(back.tensors) == set(ckpt.tensors)
        for name, t in ckpt.tensors.items():
            assert torch.equal(back.tensors[name], t), name
            assert back.tensors[name].dtype == t.dtype

    def test_save_after_load_is_byte_stable(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, ckpt)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_restore_into_models(self, tmp_path):
        ckpt, experts, detector = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)

        torch.manual_seed(99)
        experts2 = ExpertBundle(curve_width=8, pp_input_size=32)
        detector2 = SingleScaleDetector(RunConfig().detector)
        back = load_checkpoint(path)
        restore_state(back.tensors, experts=experts2, detector=detector2)
        for a, b in zip(experts.state_dict().values(), experts2.state_dict().values()):
            assert torch.equal(a, b)
        for a, b in zip(detector.state_dict().values(), detector2.state_dict().values()):
            assert torch.equal(a, b)

    def test_fingerprint_detects_bit_changes(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        before = ckpt.weight_fingerprint("experts.piem")
        name = next(k for k in ckpt.tensors if k.startswith("experts.piem") and "weight" in k)
        ckpt.tensors[name] = ckpt.tensors[name] + 1e-7
        assert ckpt.weight_fingerprint("experts.piem") != before


class TestNegativeCases:
    def test_version_mismatch(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        data = bytearray(path.read_bytes())
        (hlen,) = struct.unpack("<Q", data[4:12])
        header = json.loads(data[12:12 + hlen].decode())
        header["format_version"] = FORMAT_VERSION + 1
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        rebuilt = data[:4] + struct.pack("<Q", len(blob)) + blob + data[12 + hlen:]
        path.write_bytes(rebuilt)
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        data = path.read_bytes()
        path.write_bytes(data[:-100])
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_flipped_payload_byte(self, tmp_path):
        ckpt, _, _ = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.ckpt")
