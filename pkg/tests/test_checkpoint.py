import json
import struct

import numpy as np
import pytest

from pimlp.checkpoint import Checkpoint, history_digest, load_checkpoint, read_checkpoint_header, save_checkpoint
from pimlp.data import HyperConfig
from pimlp.errors import FormatError
from pimlp.model import init_params
from pimlp.numerics import RNG_ALGORITHM, Rng
from pimlp.train import TrainConfig, pretrain

SMALL = HyperConfig(input_len=64, patch_len=16, stride=8, channels=2, hidden_dim=8)


def _ckpt():
    X = np.random.default_rng(0).standard_normal((6, 2, 64)).astype(np.float32)
    res = pretrain(X, SMALL, TrainConfig(epochs=2, batch_size=4, seed=1))
    return Checkpoint(SMALL, res.params, res.state, {"seed": 1, "epoch": 2, "history": res.history}), X


def test_round_trip_bit_exact(tmp_path):
    ck, _ = _ckpt()
    path = tmp_path / "a.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.cfg == SMALL
    for k, v in ck.params.tensors().items():
        assert back.params.tensors()[k].tobytes() == v.tobytes()
    for k in ck.state.m:
        assert back.state.m[k].tobytes() == ck.state.m[k].tobytes()
        assert back.state.v[k].tobytes() == ck.state.v[k].tobytes()
    assert back.state.t == ck.state.t
    assert back.history == ck.history
    assert back.provenance["loss_history_digest"] == history_digest(ck.history)
    # saving the loaded checkpoint reproduces the file
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_header_contents(tmp_path):
    ck, _ = _ckpt()
    ck.params = init_params(SMALL, 3, Rng(0))
    path = tmp_path / "h.ckpt"
    save_checkpoint(ck, path)
    raw = path.read_bytes()
    assert raw[:4] == b"WFCK" and struct.unpack_from("<H", raw, 4)[0] == 1
    header, base = read_checkpoint_header(raw)
    assert header["rng_algorithm"] == RNG_ALGORITHM
    assert header["optimizer"]["beta1"] == 0.9
    names = [t["name"] for t in header["tensors"]]
    assert names[:7] == ["enc_W1", "enc_b1", "enc_W2", "enc_b2", "recon_W", "cls_W", "cls_b"]
    last = header["tensors"][-1]
    assert base + last["offset"] + 4 * int(np.prod(last["shape"])) == len(raw)


def test_params_only_checkpoint(tmp_path):
    ck = Checkpoint(SMALL, init_params(SMALL, rng=Rng(0)))
    save_checkpoint(ck, tmp_path / "p.ckpt")
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert back.state is None and not back.params.has_head


def test_corrupted_header_rejected(tmp_path):
    ck, _ = _ckpt()
    path = tmp_path / "c.ckpt"
    save_checkpoint(ck, path)
    raw = bytearray(path.read_bytes())

    bad = raw.copy()
    bad[6:10] = struct.pack("<I", len(raw) * 2)
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.offset == 6

    bad = raw.copy()
    bad[0] = ord("X")
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="byte offset 0"):
        load_checkpoint(path)

    bad = raw.copy()
    bad[4:6] = struct.pack("<H", 2)
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.offset == 4

    bad = raw.copy()
    bad[10] = ord("]")
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError):
        load_checkpoint(path)

    path.write_bytes(bytes(raw[:-8]))
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path):
    X = np.random.default_rng(0).standard_normal((10, 2, 64)).astype(np.float32)
    straight = pretrain(X, SMALL, TrainConfig(epochs=3, batch_size=4, seed=9))
    first = pretrain(X, SMALL, TrainConfig(epochs=2, batch_size=4, seed=9))
    save_checkpoint(Checkpoint(SMALL, first.params, first.state, {"history": first.history}), tmp_path / "e2.ckpt")
    back = load_checkpoint(tmp_path / "e2.ckpt")

    class Resume:
        params, state, history = back.params, back.state, back.history

    resumed = pretrain(X, SMALL, TrainConfig(epochs=3, batch_size=4, seed=9), resume=Resume)
    assert resumed.losses[2] == straight.losses[2]
    for k, v in straight.params.tensors().items():
        assert resumed.params.tensors()[k].tobytes() == v.tobytes()
