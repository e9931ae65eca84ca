"""Binary checkpoints.

Layout (all integers little-endian)::

    b"HRMY" | u32 version | u32 header_len | JSON header | payload | u32 crc32

The header is canonical JSON (sorted keys, no whitespace) holding the model
and interaction configs, the latent I/O shapes, a manifest of named tensors
with shapes and byte offsets, the optimizer step and RNG position, and free
lineage metadata.  The payload is float64 little-endian: weights, then Adam
first moments, then second moments, each in manifest order.  The CRC covers
header and payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, IncompatibleCheckpoint
from .model import InteractionConfig, ModelConfig, param_shapes
from .rng import Rng
from .train import TrainState

MAGIC = b"HRMY"
VERSION = 1
DTYPE = "<f8"
GROUPS = ("param", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    state: TrainState
    model: ModelConfig
    interaction: InteractionConfig
    lineage: dict = field(default_factory=dict)


def io_shapes(m: ModelConfig) -> dict[str, list[int]]:
    """Shapes of the latents a model consumes; recorded so mismatched timelines are caught on load."""
    return {
        "video": [m.T_v, m.P_v],
        "audio": [m.T_a, m.P_a],
        "reference": [m.T_r, m.P_a],
        "prompt_emb": [m.d_c],
        "speech_emb": [m.d_c],
    }


def _encode(ck: Checkpoint) -> bytes:
    st = ck.state
    names = list(st.params)
    manifest, chunks, off = [], [], 0
    for group, src in zip(GROUPS, (st.params, st.m, st.v)):
        for n in names:
            arr = np.ascontiguousarray(src[n], dtype=DTYPE)
            manifest.append({"group": group, "name": n, "shape": list(arr.shape), "offset": off})
            chunks.append(arr.tobytes())
            off += arr.nbytes
    header = {
        "model": asdict(ck.model),
        "interaction": asdict(ck.interaction),
        "io": io_shapes(ck.model),
        "manifest": manifest,
        "payload_bytes": off,
        "dtype": DTYPE,
        "step": st.step,
        "rng": {"seed": st.rng.seed, "counter": st.rng.counter},
        "lineage": ck.lineage,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = hb + b"".join(chunks)
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path) -> bytes:
    """Write ``ck`` to ``path``; returns the bytes written."""
    raw = _encode(ck)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(raw)
    return raw


def read_header(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint (bad magic or too short)")
    version, hl = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"checkpoint format version {version}, this build reads {VERSION}")
    body = raw[12:-4]
    if len(body) < hl:
        raise CorruptCheckpoint("file truncated inside the header")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("CRC mismatch: file is truncated or damaged")
    try:
        header = json.loads(body[:hl])
    except ValueError as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from e
    return header, body[hl:]


def _check_compatible(header: dict, expect: ModelConfig) -> None:
    want = {n: list(s) for n, s in param_shapes(expect).items()}
    have = {e["name"]: e["shape"] for e in header["manifest"] if e["group"] == "param"}
    for n, s in want.items():
        if n not in have:
            raise IncompatibleCheckpoint(f"tensor {n!r} is missing from the checkpoint")
        if have[n] != s:
            raise IncompatibleCheckpoint(f"tensor {n!r}: checkpoint shape {have[n]}, config expects {s}")
    for n in have.keys() - want.keys():
        raise IncompatibleCheckpoint(f"tensor {n!r} is not part of the configured model")
    for n, s in io_shapes(expect).items():
        if header["io"].get(n) != s:
            raise IncompatibleCheckpoint(f"input tensor {n!r}: checkpoint built for shape {header['io'].get(n)}, config expects {s}")
    stored = header["model"]
    for k, v in asdict(expect).items():
        if stored.get(k) != v:
            raise IncompatibleCheckpoint(f"model field {k!r}: checkpoint has {stored.get(k)!r}, config has {v!r}")


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, refuse one whose tensors or latent shapes disagree with it."""
    raw = Path(path).read_bytes()
    header, payload = read_header(raw)
    if header.get("dtype") != DTYPE or len(payload) != header["payload_bytes"]:
        raise CorruptCheckpoint("payload size or dtype disagrees with the header")
    if expect is not None:
        _check_compatible(header, expect)
    groups: dict[str, dict] = {g: {} for g in GROUPS}
    for e in header["manifest"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=DTYPE, count=n, offset=e["offset"]).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(np.float64)
    rng = Rng(header["rng"]["seed"], header["rng"]["counter"])
    state = TrainState(groups["param"], groups["adam_m"], groups["adam_v"], header["step"], rng)
    return Checkpoint(state, ModelConfig(**header["model"]), InteractionConfig(**header["interaction"]), header["lineage"])


def checkpoint_id(path) -> str:
    """Short content id: the stored CRC as hex."""
    raw = Path(path).read_bytes()
    return raw[-4:][::-1].hex()
