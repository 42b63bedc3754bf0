"""Bit-exact, platform-portable checkpoint files.

Layout (single file, single-pass writable):

    magic  b"IMRG1"                          5 bytes
    u64    header length, little-endian     8 bytes
    header UTF-8 JSON: {"format": 1,
                        "payload_bytes": P,
                        "tensors": {name: {"dtype": "f32",
                                           "shape": [...],
                                           "offset": o,   # into payload
                                           "length": l}}}
    payload  concatenated little-endian float32           P bytes
    trailer  UTF-8 JSON to EOF: config echo (arch / train / merge),
             training state scalars, epoch log so far, RNG position

Tensor names are namespaced: ``param/<name>`` for model parameters
(each exactly once), ``momentum/<name>`` for optimizer velocity,
``best/<name>`` for the best-validation weights when one exists.

The RNG position is just the next epoch index: all training streams are
derived per epoch (see ``seeding``), so an epoch boundary fully
determines every generator. Files are written via temp file + rename,
so readers never observe a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .configio import arch_from_dict, arch_to_dict, train_from_dict, train_to_dict
from .errors import (
    CorruptHeaderError,
    HeaderLayoutError,
    TruncatedFileError,
    UnknownDtypeError,
)
from .model import ArchConfig, Model, build_model
from .training import EpochRecord, TrainConfig, TrainState

MAGIC = b"IMRG1"
FORMAT_VERSION = 1


def save(
    model: Model,
    state: TrainState,
    configs: tuple[ArchConfig, TrainConfig],
    path: str | Path,
) -> None:
    """Write model + optimizer/merge state + config echo atomically."""
    arch, train_cfg = configs
    tensors: dict[str, np.ndarray] = {}
    for name in model.param_names():
        tensors[f"param/{name}"] = model.params[name]
        tensors[f"momentum/{name}"] = state.velocity[name]
    if state.best_params is not None:
        for name in model.param_names():
            tensors[f"best/{name}"] = state.best_params[name]

    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"format": FORMAT_VERSION, "payload_bytes": offset, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    trailer = json.dumps(
        {
            "configs": {
                "arch": arch_to_dict(arch),
                "train": train_to_dict(train_cfg),
                "merge": train_to_dict(train_cfg)["merge"],
            },
            "state": {
                "epochs_done": state.epochs_done,
                "best_epoch": state.best_epoch,
                "best_metric": state.best_metric,
                "records": [r.to_record() for r in state.records],
            },
            "rng": {"scheme": "per-epoch-streams", "next_epoch": state.epochs_done},
        },
        sort_keys=True,
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
        fh.write(trailer)
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[Model, TrainState, tuple[ArchConfig, TrainConfig]]:
    """Read a checkpoint back; exact inverse of ``save``."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is too short for a header")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes {blob[:len(MAGIC)]!r}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    if header_len == 0:
        raise CorruptHeaderError(f"{path}: header length 0")
    if header_start + header_len > len(blob):
        raise TruncatedFileError(f"{path}: header length {header_len} exceeds file")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
        entries = header["tensors"]
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc!r})") from None

    payload_start = header_start + header_len
    if payload_start + payload_bytes > len(blob):
        raise TruncatedFileError(
            f"{path}: payload of {payload_bytes} bytes exceeds file size {len(blob)}"
        )

    # validate offsets: ascending, non-overlapping, exact coverage
    covered = 0
    for name, ent in sorted(entries.items(), key=lambda kv: kv[1]["offset"]):
        if ent.get("dtype") != "f32":
            raise UnknownDtypeError(f"{path}: tensor {name!r} has dtype {ent.get('dtype')!r}")
        if ent["offset"] != covered:
            verb = "overlaps" if ent["offset"] < covered else "leaves a gap before"
            raise HeaderLayoutError(f"{path}: tensor {name!r} {verb} offset {covered}")
        expect = int(np.prod(ent["shape"], dtype=np.int64)) * 4 if ent["shape"] else 4
        if ent["length"] != expect:
            raise HeaderLayoutError(
                f"{path}: tensor {name!r} length {ent['length']} != shape size {expect}"
            )
        covered += ent["length"]
    if covered != payload_bytes:
        raise HeaderLayoutError(
            f"{path}: tensors cover {covered} bytes, payload declares {payload_bytes}"
        )

    try:
        trailer = json.loads(blob[payload_start + payload_bytes :].decode("utf-8"))
        cfg_d = trailer["configs"]
        state_d = trailer["state"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable trailer ({exc!r})") from None

    arch = arch_from_dict(cfg_d["arch"])
    train_cfg = train_from_dict(cfg_d["train"])

    def tensor(name: str) -> np.ndarray:
        ent = entries[name]
        start = payload_start + ent["offset"]
        flat = np.frombuffer(blob, dtype="<f4", count=ent["length"] // 4, offset=start)
        return flat.reshape(ent["shape"]).astype(np.float32)

    model = build_model(arch, train_cfg.seed)
    expected = {f"param/{n}" for n in model.param_names()}
    present = {n for n in entries if n.startswith("param/")}
    if present != expected:
        missing = sorted(expected - present)
        extra = sorted(present - expected)
        raise HeaderLayoutError(
            f"{path}: parameter names mismatch (missing {missing}, unexpected {extra})"
        )
    for name in model.param_names():
        model.params[name][...] = tensor(f"param/{name}")

    velocity = {n: tensor(f"momentum/{n}") for n in model.param_names()}
    best_params = None
    if any(n.startswith("best/") for n in entries):
        best_params = {n: tensor(f"best/{n}") for n in model.param_names()}

    state = TrainState(
        epochs_done=int(state_d["epochs_done"]),
        velocity=velocity,
        best_epoch=int(state_d["best_epoch"]),
        best_metric=state_d["best_metric"],
        best_params=best_params,
        records=[EpochRecord.from_record(r) for r in state_d["records"]],
    )
    return model, state, (arch, train_cfg)
