"""Single-file parameter archives.

Layout::

    b"BVCARCH1" | uint64 LE header length | UTF-8 JSON header | tensor blobs

The header is serialized with sorted keys and lists every tensor as
``{"name", "shape", "offset", "nbytes"}``; blobs are little-endian float32,
row-major, in header order. Writing the same content twice gives identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"BVCARCH1"
FORMAT_VERSION = 1


def _to_bytes(t) -> tuple[list[int], bytes]:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return list(arr.shape), arr.tobytes()


def write_archive(path, header: dict, tensors: dict):
    entries, blobs, offset = [], [], 0
    for name in tensors:
        shape, raw = _to_bytes(tensors[name])
        entries.append({"name": name, "shape": shape, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head["tensors"] = entries
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head_bytes)))
        f.write(head_bytes)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def read_archive(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a parameter archive")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    base = 16 + n
    tensors = {}
    for e in header.pop("tensors"):
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def _optimizer_to_archive(prefix: str, opt: torch.optim.Optimizer, tensors: dict) -> dict:
    sd = opt.state_dict()
    groups = []
    for g in sd["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = list(g["betas"])
        groups.append(g)
    for idx in sorted(sd["state"]):
        for key in sorted(sd["state"][idx]):
            val = sd["state"][idx][key]
            tensors[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return {"param_groups": groups}


def _optimizer_from_archive(prefix: str, meta: dict, tensors: dict) -> dict:
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    state = {}
    plen = len(prefix) + 1
    for name, t in tensors.items():
        if name.startswith(prefix + "/"):
            idx, key = name[plen:].split("/", 1)
            state.setdefault(int(idx), {})[key] = t.clone()
    return {"state": state, "param_groups": groups}


def save_checkpoint(path, *, modules: dict, optimizers: dict | None = None, meta: dict | None = None):
    """Write named modules' state dicts and optimizer states into one archive.

    ``modules`` maps a prefix (``"model"``, ``"disc"``, ...) to an ``nn.Module``;
    ``meta`` is any JSON-serializable provenance (configs, registry, epoch).
    """
    tensors = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            tensors[f"{prefix}/{k}"] = v
    opt_meta = {}
    for name, opt in (optimizers or {}).items():
        opt_meta[name] = _optimizer_to_archive(f"optim/{name}", opt, tensors)
    header = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "optimizers": opt_meta,
        "modules": sorted(modules),
    }
    write_archive(path, header, tensors)


class Checkpoint:
    """Parsed checkpoint: header metadata plus raw tensors, loadable into modules."""

    def __init__(self, header: dict, tensors: dict):
        if header.get("kind") != "checkpoint":
            raise ValueError(f"not a checkpoint archive (kind={header.get('kind')!r})")
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
        self.header = header
        self.tensors = tensors

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(*read_archive(path))

    @property
    def meta(self) -> dict:
        return self.header["meta"]

    def has_module(self, prefix: str) -> bool:
        return prefix in self.header["modules"]

    def state_dict(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}

    def load_module(self, prefix: str, module: torch.nn.Module):
        sd = self.state_dict(prefix)
        own = module.state_dict()
        sd = {k: v.to(own[k].dtype) if k in own else v for k, v in sd.items()}
        module.load_state_dict(sd)

    def has_optimizer(self, name: str) -> bool:
        return name in self.header["optimizers"]

    def load_optimizer(self, name: str, opt: torch.optim.Optimizer):
        opt.load_state_dict(_optimizer_from_archive(f"optim/{name}", self.header["optimizers"][name], self.tensors))
