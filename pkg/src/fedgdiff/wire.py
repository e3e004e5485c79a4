"""Bit-exact model serialization, payload codecs and the communication ledger.

Blob layout (all integers little-endian)::

    b"FGDM" | version u16 | kind u8
    | depth u32 | n_widths u32 | widths u32 * n_widths | K u32 | L u32
    | n_tensors u32
    | { name_len u16 | name utf-8 | rank u8 | dims u32 * rank | float32 data } * n_tensors
    | crc32 u32 (over everything before it)
"""

from __future__ import annotations

import csv
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionModel, LabelNoiseEmbedding, ScoreNetwork
from .gin import GinClassifier
from .nn import ContractError, param_store

MAGIC = b"FGDM"
VERSION = 1
KINDS = {"diffusion-model": 0, "gnn-weights": 1, "gnn-init": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}


class WireFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WireBlob:
    data: bytes
    kind: str

    @property
    def byte_length(self) -> int:
        return len(self.data)


def _pack(kind: str, depth: int, widths, num_classes: int, levels: int, tensors: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HB", VERSION, KINDS[kind])
    out += struct.pack("<II", depth, len(widths))
    out += struct.pack(f"<{len(widths)}I", *widths)
    out += struct.pack("<III", num_classes, levels, len(tensors))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(np.asarray(t, dtype="<f4"))
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"{name} has non-finite values")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _unpack(data: bytes):
    if len(data) < 4 + 3 + 4 or data[:4] != MAGIC:
        raise WireFormatError("bad magic")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise WireFormatError("CRC mismatch")
    pos = 4
    version, kind = struct.unpack_from("<HB", data, pos)
    pos += 3
    if version != VERSION:
        raise WireFormatError(f"unsupported format version {version}")
    depth, n_widths = struct.unpack_from("<II", data, pos)
    pos += 8
    widths = struct.unpack_from(f"<{n_widths}I", data, pos)
    pos += 4 * n_widths
    num_classes, levels, count = struct.unpack_from("<III", data, pos)
    pos += 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = arr.astype(np.float32)
    if pos != len(data) - 4:
        raise WireFormatError("trailing bytes before CRC")
    return KIND_NAMES[kind], depth, list(widths), num_classes, levels, tensors


def serialize_model(model, kind: str | None = None) -> WireBlob:
    """Serialize a :class:`DiffusionModel` or :class:`GinClassifier` into a blob."""
    if isinstance(model, DiffusionModel):
        arch = model.architecture()
        tensors = {name: p.detach().numpy() for name, p in model.parameters().items()}
        if model.variant == "basic":
            tensors["sigmas"] = model.sigmas.numpy()
        for k in sorted(model.node_counts):
            tensors[f"node_counts.{k}"] = np.asarray(model.node_counts[k], dtype=np.float32)
        data = _pack("diffusion-model", arch["depth"], [arch["channels"], arch["hidden"]],
                     model.num_classes, arch["num_levels"], tensors)
        return WireBlob(data, "diffusion-model")
    if isinstance(model, GinClassifier):
        kind = kind or "gnn-weights"
        tensors = {name: p.detach().numpy() for name, p in param_store(model).items()}
        data = _pack(kind, model.layers, [model.in_dim, model.hidden], model.num_classes, 0, tensors)
        return WireBlob(data, kind)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _load(module: nn.Module, tensors: dict, prefix: str) -> None:
    with torch.no_grad():
        for name, p in param_store(module).items():
            key = prefix + name
            if key not in tensors:
                raise WireFormatError(f"missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise WireFormatError(f"{key}: shape {tensors[key].shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(tensors[key].copy()))


def deserialize_model(blob):
    data = blob.data if isinstance(blob, WireBlob) else bytes(blob)
    kind, depth, widths, num_classes, levels, tensors = _unpack(data)
    if kind in ("gnn-weights", "gnn-init"):
        in_dim, hidden = widths
        clf = GinClassifier(in_dim, num_classes, hidden, depth)
        _load(clf, tensors, "")
        return clf
    channels, hidden = widths
    node_counts = {
        int(name.split(".")[1]): t.astype(np.float64)
        for name, t in tensors.items() if name.startswith("node_counts.")
    }
    if "emb.raw" in tensors:
        net = ScoreNetwork(depth, channels, hidden, levels)
        _load(net, tensors, "net.")
        emb = LabelNoiseEmbedding(num_classes, np.ones(levels))
        with torch.no_grad():
            emb.raw.copy_(torch.from_numpy(tensors["emb.raw"].copy()))
        sigmas = torch.exp(emb.raw.detach()[0].clone())
        return DiffusionModel("advanced", num_classes, sigmas, {0: net}, emb, node_counts)
    model = DiffusionModel("basic", num_classes, torch.from_numpy(tensors["sigmas"].copy()))
    labels = sorted({int(n.split(".")[0][5:]) for n in tensors if n.startswith("label")})
    for k in labels:
        net = ScoreNetwork(depth, channels, hidden, levels)
        _load(net, tensors, f"label{k}.")
        model.networks[k] = net
    model.node_counts = node_counts
    return model


class PassThroughCodec:
    """Identity codec: stands in for an encryption scheme the server can compute under."""

    identifier = "passthrough"
    server_can_compute = True

    def encrypt(self, data: bytes) -> bytes:
        return bytes(data)

    def decrypt(self, data: bytes) -> bytes:
        return bytes(data)


class StreamCipherCodec:
    """XOR with a BLAKE2b counter-mode keystream; length preserving, opaque to the server.

    A simulation aid only: the keystream does not depend on a nonce.
    """

    identifier = "stream"
    server_can_compute = False

    def __init__(self, key: bytes | str = b"shared-client-key"):
        self.key = key.encode() if isinstance(key, str) else bytes(key)

    def _keystream(self, n: int) -> np.ndarray:
        blocks = []
        for counter in range((n + 63) // 64):
            h = hashlib.blake2b(counter.to_bytes(8, "little"), key=self.key[:64], digest_size=64)
            blocks.append(h.digest())
        return np.frombuffer(b"".join(blocks)[:n], dtype=np.uint8)

    def encrypt(self, data: bytes) -> bytes:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        return (buf ^ self._keystream(len(buf))).tobytes()

    decrypt = encrypt


def make_codec(identifier: str, key: str | None = None):
    if identifier == "passthrough":
        return PassThroughCodec()
    if identifier == "stream":
        return StreamCipherCodec(key or "shared-client-key")
    raise ValueError(f"unknown codec {identifier!r}")


CODECS = ("passthrough", "stream")

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str
    sender: str
    receiver: str
    kind: str
    bytes: int


@dataclass
class CommLedger:
    """Append-only record of every payload exchanged between server and clients."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round_: int, direction: str, sender, receiver, kind: str, nbytes: int):
        if self.entries and round_ < self.entries[-1].round:
            raise ValueError(f"round {round_} recorded after round {self.entries[-1].round}")
        entry = LedgerEntry(int(round_), direction, str(sender), str(receiver), kind, int(nbytes))
        self.entries.append(entry)
        return entry

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})

    def total(self, kinds=None, direction=None) -> int:
        return sum(
            e.bytes for e in self.entries
            if (kinds is None or e.kind in kinds) and (direction is None or e.direction == direction)
        )

    def by_round(self, kinds=None) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            if kinds is None or e.kind in kinds:
                out[e.round] = out.get(e.round, 0) + e.bytes
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "direction", "sender", "receiver", "kind", "bytes"])
            for e in self.entries:
                w.writerow([e.round, e.direction, e.sender, e.receiver, e.kind, e.bytes])
        return path

    @classmethod
    def from_csv(cls, path) -> "CommLedger":
        ledger = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                ledger.record(int(row["round"]), row["direction"], row["sender"], row["receiver"],
                              row["kind"], int(row["bytes"]))
        return ledger
