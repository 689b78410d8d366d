import json
import struct

import numpy as np
import pytest
import torch

from bottlevc.checkpoint import MAGIC, Checkpoint, read_archive, save_checkpoint, write_archive


def _net(seed=0):
    torch.manual_seed(seed)
    return torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.ReLU(), torch.nn.Linear(4, 2))


def test_archive_layout(tmp_path):
    write_archive(tmp_path / "a", {"kind": "x"}, {"w": torch.tensor([[1.0, 2.0]]), "b": torch.tensor([3.0])})
    raw = (tmp_path / "a").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert header["tensors"][0] == {"name": "w", "shape": [1, 2], "offset": 0, "nbytes": 8}
    assert np.frombuffer(raw[16 + n:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]
    h, t = read_archive(tmp_path / "a")
    assert h == {"kind": "x"} and torch.equal(t["b"], torch.tensor([3.0]))


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "junk").write_bytes(b"not an archive")
    with pytest.raises(ValueError):
        read_archive(tmp_path / "junk")
    write_archive(tmp_path / "a", {"kind": "other"}, {})
    with pytest.raises(ValueError, match="not a checkpoint"):
        Checkpoint.load(tmp_path / "a")


def test_round_trip_and_byte_stability(tmp_path):
    net = _net()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    net(torch.randn(5, 3)).sum().backward()
    opt.step()
    meta = {"epoch": 3, "config": {"a": 1}}
    save_checkpoint(tmp_path / "1.ckpt", modules={"net": net}, optimizers={"opt": opt}, meta=meta)
    save_checkpoint(tmp_path / "2.ckpt", modules={"net": net}, optimizers={"opt": opt}, meta=meta)
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    ck = Checkpoint.load(tmp_path / "1.ckpt")
    assert ck.meta == meta and ck.has_module("net") and ck.has_optimizer("opt")
    net2 = _net(1)
    ck.load_module("net", net2)
    x = torch.randn(7, 3)
    assert torch.equal(net(x), net2(x))
    opt2 = torch.optim.Adam(net2.parameters(), lr=5.0)
    ck.load_optimizer("opt", opt2)
    assert opt2.param_groups[0]["lr"] == 1e-3
    for p, q in zip(net.parameters(), net2.parameters()):
        assert torch.equal(opt.state[p]["exp_avg"], opt2.state[q]["exp_avg"])
        assert torch.equal(opt.state[p]["exp_avg_sq"], opt2.state[q]["exp_avg_sq"])


def test_resaved_checkpoint_is_identical(tmp_path):
    net = _net()
    save_checkpoint(tmp_path / "a.ckpt", modules={"net": net}, meta={"k": [1, 2]})
    other = _net(9)
    Checkpoint.load(tmp_path / "a.ckpt").load_module("net", other)
    save_checkpoint(tmp_path / "b.ckpt", modules={"net": other}, meta={"k": [1, 2]})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
