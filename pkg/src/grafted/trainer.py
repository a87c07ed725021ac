"""Optimizer, learning-rate schedule, checkpointing, and the pretraining loop.

The checkpoint container (docs/checkpoint_format.md) is a self-describing
binary file: magic, format version, a JSON header with the model config, the
vocabulary table, the named-tensor index (shape, dtype, byte offset), rng
states and the target-size table, then raw little-endian tensor bytes, and a
trailing CRC-32 over everything before it.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .editnet import EditModel, ModelConfig, Parameters, init_params
from .errors import CorruptFile, KeyMismatch, NonFiniteGradient, VersionMismatch
from .tokenizer import Vocab, vocab_from_text, vocab_to_text


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Parameters = field(default_factory=dict)
    v: Parameters = field(default_factory=dict)


def optimizer_step(
    params: Parameters,
    grads: Parameters,
    state: OptimizerState,
) -> tuple[Parameters, OptimizerState]:
    """One decoupled-weight-decay Adam update; deterministic and functional."""
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise KeyMismatch(f"parameter/gradient key sets differ: {sorted(missing)[:5]}")
    for name, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(f"gradient for {name!r} contains NaN or inf")

    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params: Parameters = {}
    new_m: Parameters = {}
    new_v: Parameters = {}
    for name, p in params.items():
        g = grads[name]
        m_prev = state.m.get(name, torch.zeros_like(p))
        v_prev = state.v.get(name, torch.zeros_like(p))
        m = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        update = (m / bc1) / ((v / bc2).sqrt() + state.eps)
        new_params[name] = p - state.lr * update - state.lr * state.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def clip_gradients(grads: Parameters, max_norm: float = 1.0) -> tuple[Parameters, float]:
    """Global-norm clipping; returns (possibly scaled grads, pre-clip norm)."""
    total = 0.0
    for g in grads.values():
        total += float((g.double() ** 2).sum())
    norm = total**0.5
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"GRFTCKPT"
_VERSION = 1
_DTYPES = {"f4": torch.float32, "u1": torch.uint8}


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocab
    params: Parameters
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    size_table: dict[int, float] = field(default_factory=dict)
    step: int = 0

    def to_model(self) -> EditModel:
        return EditModel(
            config=self.config,
            params={k: v.detach().clone() for k, v in self.params.items()},
            vocab=self.vocab,
            size_table=dict(self.size_table),
        )


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Write the versioned container; see docs/checkpoint_format.md."""
    tensors: list[tuple[str, str, tuple[int, ...], bytes]] = []

    def add(name: str, tensor: torch.Tensor) -> None:
        if tensor.dtype == torch.uint8:
            code = "u1"
            raw = tensor.detach().cpu().numpy().tobytes()
        else:
            code = "f4"
            raw = _tensor_bytes(tensor.to(torch.float32))
        tensors.append((name, code, tuple(tensor.shape), raw))

    for name in sorted(checkpoint.params):
        add("param." + name, checkpoint.params[name])
    opt_meta = None
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        opt_meta = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "step": opt.step,
        }
        for name in sorted(opt.m):
            add("opt.m." + name, opt.m[name])
        for name in sorted(opt.v):
            add("opt.v." + name, opt.v[name])

    offset = 0
    index = []
    payload_parts = []
    for name, code, shape, raw in tensors:
        index.append(
            {"name": name, "dtype": code, "shape": list(shape), "offset": offset, "nbytes": len(raw)}
        )
        payload_parts.append(raw)
        offset += len(raw)

    header = {
        "config": checkpoint.config.to_dict(),
        "vocab": vocab_to_text(checkpoint.vocab),
        "tensors": index,
        "optimizer": opt_meta,
        "rng": _encode_rng(checkpoint.rng_state),
        "size_table": {str(k): v for k, v in checkpoint.size_table.items()},
        "step": checkpoint.step,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = (
        _MAGIC
        + struct.pack("<I", _VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + b"".join(payload_parts)
    )
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def _encode_rng(rng_state: dict | None) -> dict | None:
    if rng_state is None:
        return None
    out = {}
    if "torch" in rng_state:
        out["torch"] = rng_state["torch"].hex() if isinstance(rng_state["torch"], bytes) else rng_state["torch"]
    if "numpy" in rng_state:
        out["numpy"] = rng_state["numpy"]
    return out


def _decode_rng(data: dict | None) -> dict | None:
    if data is None:
        return None
    out = {}
    if "torch" in data:
        out["torch"] = bytes.fromhex(data["torch"])
    if "numpy" in data:
        out["numpy"] = data["numpy"]
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; raises CorruptFile / VersionMismatch."""
    blob = Path(path).read_bytes()
    if len(blob) < len(_MAGIC) + 4 + 8 + 4:
        raise CorruptFile("file too short to be a checkpoint")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CorruptFile("bad magic bytes")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CorruptFile("checksum mismatch")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != _VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {_VERSION}")
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if pos + header_len > len(body):
        raise CorruptFile("truncated header")
    header = json.loads(body[pos : pos + header_len].decode("utf-8"))
    payload = body[pos + header_len :]

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CorruptFile(f"tensor {entry['name']!r} extends past end of file")
        raw = payload[start : start + nbytes]
        dtype = {"f4": np.float32, "u1": np.uint8}[entry["dtype"]]
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dtype, copy=True))

    params = {
        name[len("param.") :]: t for name, t in tensors.items() if name.startswith("param.")
    }
    optimizer = None
    if header.get("optimizer"):
        meta = header["optimizer"]
        optimizer = OptimizerState(
            lr=meta["lr"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            eps=meta["eps"],
            weight_decay=meta["weight_decay"],
            step=meta["step"],
            m={n[len("opt.m.") :]: t for n, t in tensors.items() if n.startswith("opt.m.")},
            v={n[len("opt.v.") :]: t for n, t in tensors.items() if n.startswith("opt.v.")},
        )
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        vocab=vocab_from_text(header["vocab"]),
        params=params,
        optimizer=optimizer,
        rng_state=_decode_rng(header.get("rng")),
        size_table={int(k): float(v) for k, v in header.get("size_table", {}).items()},
        step=int(header.get("step", 0)),
    )


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    diffusion_steps: int = 2000
    log_every: int = 25


def size_table_from_samples(samples: Sequence) -> dict[int, float]:
    """Empirical distribution of (target atoms - source atoms)."""
    counts: dict[int, int] = {}
    for s in samples:
        delta = len(s.target_graph()) - len(s.source_graph())
        counts[delta] = counts.get(delta, 0) + 1
    total = sum(counts.values())
    return {d: c / total for d, c in sorted(counts.items())}


def run_pretraining(
    model: EditModel,
    samples: Sequence,
    config: PretrainConfig,
    optimizer: OptimizerState | None = None,
    on_step: Callable[[int, float, dict], None] | None = None,
) -> tuple[EditModel, OptimizerState, list[tuple[int, float]]]:
    """Train the editing network by masked reconstruction; returns the loss curve."""
    from .diffusion import Schedule, pretrain_loss

    schedule = Schedule(config.diffusion_steps)
    rng = np.random.default_rng(config.seed)
    state = optimizer or OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    params = model.params
    curve: list[tuple[int, float]] = []
    indices = np.arange(len(samples))
    for step in range(state.step, state.step + config.steps):
        picked = rng.choice(indices, size=min(config.batch_size, len(samples)), replace=False)
        batch = [samples[int(i)] for i in picked]
        working = EditModel(model.config, params, model.vocab, model.size_table)
        loss, grads, diag = pretrain_loss(working, batch, schedule, rng)
        grads, grad_norm = clip_gradients(grads, config.grad_clip)
        state = replace(state, lr=lr_schedule(step, config.warmup_steps, config.lr))
        params, state = optimizer_step(params, grads, state)
        curve.append((step, loss))
        if on_step is not None and (step % config.log_every == 0):
            on_step(step, loss, {**diag, "grad_norm": grad_norm, "lr": state.lr})
    final = EditModel(model.config, params, model.vocab, model.size_table)
    return final, state, curve


def new_model(
    config: ModelConfig,
    vocab: Vocab,
    seed: int,
    size_table: dict[int, float] | None = None,
) -> EditModel:
    return EditModel(
        config=config,
        params=init_params(config, seed),
        vocab=vocab,
        size_table=size_table or {},
    )
