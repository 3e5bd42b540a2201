"""Checkpoint files: a plain-text header followed by raw little-endian payloads.

Layout::

    SSCN-CHECKPOINT
    version 1
    spec {"arch": "UNet", ...}
    state {"seed": 0, "epoch": 12, ...}
    tensor body.0.weight f4 27,1,8
    ...
    end
    <payloads, concatenated in header order>

Payloads are ``<f4`` for 32-bit networks and ``<f8`` for 64-bit ones, so a
round trip is bit exact either way.  Nothing time-dependent is written, so
identical runs give identical files.
"""
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .network import Network, NetworkSpec, build_network
from .train import OptimizerState

MAGIC = "SSCN-CHECKPOINT"
VERSION = 1
_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: Dict[str, np.ndarray]
    state: dict = field(default_factory=dict)

    @property
    def epoch(self):
        return self.state.get("epoch", 0)


def _code(arr):
    for code, dt in _CODES.items():
        if arr.dtype.kind == "f" and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def snapshot(net: Network, opt: Optional[OptimizerState] = None, **state) -> Checkpoint:
    """Copy parameters, batch-norm running statistics and optimizer state."""
    tensors = {}
    for name, p in net.parameters():
        tensors["param:" + name] = p.data.copy()
    for name, b in net.buffers():
        tensors["buffer:" + name] = b.copy()
    if opt is not None:
        state["optimizer"] = {"lr": opt.lr, "momentum": opt.momentum, "nesterov": opt.nesterov,
                              "weight_decay": opt.weight_decay}
        for name, v in sorted(opt.velocity.items()):
            tensors["velocity:" + name] = v.copy()
    return Checkpoint(net.spec, tensors, state)


def write(ckpt: Checkpoint, path):
    header = [MAGIC, f"version {VERSION}",
              "spec " + json.dumps(ckpt.spec.to_dict(), sort_keys=True),
              "state " + json.dumps(ckpt.state, sort_keys=True)]
    for name, arr in ckpt.tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        shape = ",".join(str(n) for n in arr.shape)
        header.append(f"tensor {name} {_code(arr)} {shape}")
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_CODES[_code(arr)]).tobytes())


def save(path, net: Network, opt: Optional[OptimizerState] = None, **state):
    write(snapshot(net, opt, **state), path)


def read(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def next_line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = blob[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        return line

    if next_line() != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    lineno = 1
    entries, spec, state = [], None, {}
    while True:
        line = next_line()
        lineno += 1
        key, _, rest = line.partition(" ")
        try:
            if key == "version":
                if int(rest) != VERSION:
                    raise CheckpointError(f"{path}:{lineno}: unsupported version {rest}")
            elif key == "spec":
                spec = NetworkSpec.from_dict(json.loads(rest))
            elif key == "state":
                state = json.loads(rest)
            elif key == "tensor":
                name, code, shape = rest.split(" ")
                dims = tuple(int(n) for n in shape.split(",")) if shape else ()
                entries.append((name, _CODES[code], dims))
            elif key == "end":
                break
            else:
                raise CheckpointError(f"{path}:{lineno}: unexpected header line {line!r}")
        except (ValueError, KeyError) as e:
            if isinstance(e, CheckpointError):
                raise
            raise CheckpointError(f"{path}:{lineno}: malformed header line {line!r}") from None
    if spec is None:
        raise CheckpointError(f"{path}: header has no network spec")
    tensors = {}
    for name, dt, dims in entries:
        nbytes = dt.itemsize * int(np.prod(dims))
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: payload for {name} is truncated")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after payloads")
    return Checkpoint(spec, tensors, state)


def restore(ckpt: Checkpoint, net: Optional[Network] = None):
    """Load a checkpoint into ``net`` (built from its spec when omitted).

    Returns ``(net, optimizer_or_None)``.
    """
    if net is None:
        net = build_network(ckpt.spec)
    elif net.spec != ckpt.spec:
        raise CheckpointError("checkpoint spec does not match the network")
    targets = {"param:" + n: p.data for n, p in net.parameters()}
    targets.update({"buffer:" + n: b for n, b in net.buffers()})
    missing = set(targets) - set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    for name, dst in targets.items():
        src = ckpt.tensors[name]
        if src.shape != dst.shape or src.dtype != dst.dtype:
            raise CheckpointError(f"{name}: stored {src.dtype}{src.shape}, "
                                  f"network has {dst.dtype}{dst.shape}")
        dst[...] = src
    opt = None
    if "optimizer" in ckpt.state:
        o = ckpt.state["optimizer"]
        opt = OptimizerState(o["lr"], o["momentum"], o["nesterov"], o["weight_decay"])
        for name, arr in ckpt.tensors.items():
            if name.startswith("velocity:"):
                opt.velocity[name[len("velocity:"):]] = arr.copy()
    return net, opt


def load(path, net: Optional[Network] = None):
    ckpt = read(path)
    net, opt = restore(ckpt, net)
    return net, opt, ckpt
