"""Checkpoint files: one magic line, one JSON header line, then raw little-endian arrays.

The header lists every array (name, shape, dtype) in the order its bytes follow.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, config_from_dict
from .nets import Seq2Seq
from .optim import AdamState

MAGIC = b"DOMAINMT-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: list[str]
    params: dict[str, np.ndarray]
    step: int = 0
    temperature: float = 1.0
    frozen: bool = False
    adam: AdamState | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Seq2Seq:
        model = Seq2Seq(self.config.model, self.config.method, self.config.target_encoder_input)
        model.load_arrays(self.params)
        return model


def _entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.adam is not None:
        items += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
        items += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    return items


def checkpoint_save(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    entries = _entries(ckpt)
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab,
        "step": ckpt.step,
        "temperature": ckpt.temperature,
        "frozen": ckpt.frozen,
        "adam": None if ckpt.adam is None else {
            "step": ckpt.adam.step, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
        },
        "extra": ckpt.extra,
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.str.lstrip("<>=|")} for n, a in entries],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def checkpoint_load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc.msg})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    pos = nl + 1
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(
            spec["shape"]).astype(dt.newbyteorder("="))
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after the declared arrays")
    try:
        config = config_from_dict(header["config"])
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad config echo: {exc}") from None
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(a["step"], {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                         {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
                         a["beta1"], a["beta2"], a["eps"])
    ckpt = Checkpoint(config, header["vocab"], params, header["step"], header["temperature"],
                      header["frozen"], adam, header.get("extra", {}))
    # shape validation against a freshly built model
    expected = Seq2Seq(config.model, config.method, config.target_encoder_input).params
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        surplus = sorted(set(params) - set(expected))
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {surplus})")
    for k, t in expected.items():
        if t.shape != params[k].shape:
            raise CheckpointError(f"{path}: {k!r} has shape {params[k].shape}, header config implies {t.shape}")
    return ckpt


def from_model(model: Seq2Seq, config: RunConfig, vocab: list[str], **kw) -> Checkpoint:
    return Checkpoint(config, list(vocab), {k: p.data.copy() for k, p in model.params.items()}, **kw)
