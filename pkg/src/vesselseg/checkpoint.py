"""Binary checkpoint container.

Layout: magic ``VNCK``, u32 version, u32 tensor count; per tensor a u16 name
length, the UTF-8 name, u8 rank, u32 dims, and a little-endian float32 payload.

Non-tensor state rides along as reserved ``__meta__.*`` tensors: the
architecture config echo, the training epoch, and the master RNG state
(encoded as exact 16-bit limbs). Optimizer accumulators, when saved, use the
``__opt__.v.`` prefix. Strict parameter loading ignores both reserved groups.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .arch import ARCH_KINDS, ArchConfig, Network, build_network
from .errors import DataFormatError, UsageError

MAGIC = b"VNCK"
VERSION = 1
META_ARCH = "__meta__.arch"
META_EPOCH = "__meta__.epoch"
META_RNG = "__meta__.rng"
OPT_PREFIX = "__opt__.v."


@dataclass
class Checkpoint:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]  # parameters + batch-norm running stats
    epoch: int = 0
    rng_state: dict | None = None
    optimizer_v: dict[str, np.ndarray] | None = None


@dataclass
class LoadReport:
    matched: list[str]
    skipped: list[str]
    fraction: float


# ---------------------------------------------------------------------------
# Meta encoding helpers


def _arch_to_array(cfg: ArchConfig) -> np.ndarray:
    return np.array([ARCH_KINDS.index(cfg.kind), cfg.num_scales, cfg.base_channels,
                     cfg.path_channels, cfg.input_channels,
                     int(cfg.deep_supervision), cfg.input_size], dtype=np.float32)


def _arch_from_array(arr: np.ndarray) -> ArchConfig:
    if arr.shape != (7,):
        raise DataFormatError("malformed architecture echo in checkpoint")
    vals = [int(v) for v in arr]
    return ArchConfig(kind=ARCH_KINDS[vals[0]], num_scales=vals[1],
                      base_channels=vals[2], per_path_channels=vals[3],
                      input_channels=vals[4], deep_supervision=bool(vals[5]),
                      input_size=vals[6])


def _int_to_limbs(value: int, n_limbs: int) -> list[float]:
    return [float((value >> (16 * i)) & 0xFFFF) for i in range(n_limbs)]


def _limbs_to_int(limbs) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(limbs))


def _rng_to_array(state: dict) -> np.ndarray:
    inner = state["state"]
    limbs = (_int_to_limbs(inner["state"], 8) + _int_to_limbs(inner["inc"], 8)
             + [float(state["has_uint32"]), float(state["uinteger"])])
    return np.array(limbs, dtype=np.float32)


def _rng_from_array(arr: np.ndarray) -> dict:
    if arr.shape != (18,):
        raise DataFormatError("malformed RNG state in checkpoint")
    return {"bit_generator": "PCG64",
            "state": {"state": _limbs_to_int(arr[:8]), "inc": _limbs_to_int(arr[8:16])},
            "has_uint32": int(arr[16]), "uinteger": int(arr[17])}


# ---------------------------------------------------------------------------
# Network state capture / restore


def snapshot_network(net: Network) -> dict[str, np.ndarray]:
    """Copies of every parameter plus batch-norm running statistics."""
    out = {name: p.data.copy() for name, p in net.params.items()}
    for name, bn in net.bn_layers.items():
        out[f"{name}.running_mean"] = bn.state.running_mean.copy()
        out[f"{name}.running_var"] = bn.state.running_var.copy()
    return out


def _network_slots(net: Network) -> dict[str, np.ndarray]:
    """Writable views of the arrays a checkpoint can populate."""
    slots = {name: p.data for name, p in net.params.items()}
    for name, bn in net.bn_layers.items():
        slots[f"{name}.running_mean"] = bn.state.running_mean
        slots[f"{name}.running_var"] = bn.state.running_var
    return slots


def load_pretrained(ck: Checkpoint, net: Network, mode: str = "strict") -> LoadReport:
    """Copy checkpoint tensors into the network.

    ``strict`` requires an exact name/shape match of every slot; ``by_name``
    copies the matching subset (the transfer-learning hook) and reports the
    matched fraction. Nothing is mutated before validation passes.
    """
    if mode not in ("strict", "by_name"):
        raise UsageError(f"load mode must be 'strict' or 'by_name', got '{mode}'")
    slots = _network_slots(net)
    if mode == "strict":
        missing = sorted(set(slots) - set(ck.tensors))
        extra = sorted(set(ck.tensors) - set(slots))
        bad_shape = sorted(n for n in set(slots) & set(ck.tensors)
                           if slots[n].shape != ck.tensors[n].shape)
        if missing or extra or bad_shape:
            raise DataFormatError(
                "strict load mismatch: "
                f"missing={missing[:5]}, unexpected={extra[:5]}, shape={bad_shape[:5]}")
        matched = list(slots)
    else:
        matched = [n for n in slots
                   if n in ck.tensors and ck.tensors[n].shape == slots[n].shape]
    for name in matched:
        slots[name][...] = ck.tensors[name]
    skipped = [n for n in slots if n not in matched]
    return LoadReport(matched=matched, skipped=skipped,
                      fraction=len(matched) / len(slots))


def network_from_checkpoint(ck: Checkpoint, seed: int = 0) -> Network:
    """Build the echoed architecture and strictly load the stored state."""
    net = build_network(replace(ck.arch), seed=seed)
    load_pretrained(ck, net, mode="strict")
    return net


# ---------------------------------------------------------------------------
# File IO


def _encode_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise UsageError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr, dtype=np.float32)
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, ck: Checkpoint) -> None:
    items: list[tuple[str, np.ndarray]] = list(ck.tensors.items())
    items.append((META_ARCH, _arch_to_array(ck.arch)))
    items.append((META_EPOCH, np.array([ck.epoch], dtype=np.float32)))
    if ck.rng_state is not None:
        items.append((META_RNG, _rng_to_array(ck.rng_state)))
    if ck.optimizer_v is not None:
        items.extend((OPT_PREFIX + name, arr) for name, arr in ck.optimizer_v.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            _encode_tensor(f, name, arr)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
            pos += 4 * rank
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
        except (struct.error, ValueError) as exc:
            raise DataFormatError(f"{path}: truncated checkpoint") from exc
        if name in raw:
            raise DataFormatError(f"{path}: duplicate tensor '{name}'")
        raw[name] = arr.reshape(dims).astype(np.float32)
    if META_ARCH not in raw:
        raise DataFormatError(f"{path}: checkpoint lacks architecture echo")
    arch = _arch_from_array(raw.pop(META_ARCH))
    epoch = int(raw.pop(META_EPOCH)[0]) if META_EPOCH in raw else 0
    rng_state = _rng_from_array(raw.pop(META_RNG)) if META_RNG in raw else None
    opt = {name[len(OPT_PREFIX):]: arr for name, arr in raw.items()
           if name.startswith(OPT_PREFIX)}
    tensors = {name: arr for name, arr in raw.items()
               if not name.startswith(OPT_PREFIX)}
    return Checkpoint(arch=arch, tensors=tensors, epoch=epoch,
                      rng_state=rng_state, optimizer_v=opt or None)
