"""Data ingestion, optimization, and the training loop.

Corpora are read as raw bytes, one BOS token in front of each file, cut
into fixed (context + 1)-token chunks, and globally shuffled under the run
seed. Optimization is AdamW with linear warmup into a cosine decay toward
a minimum-LR fraction, global-norm gradient clipping, and decoupled weight
decay that skips the elastic offsets and distance-bias tables (decay would
drag the offsets back to zero and flatten the learned decay curves).

An optional probe replaces the token at one fixed position of every
training chunk with a reserved mask id.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .core import Tape, Tensor, backward
from .model import BOS_ID, MASK_ID, ModelConfig, TransformerLM, save_checkpoint

NO_DECAY_SUFFIXES = ("attn.tau", "attn.bias_table")


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; diagnostics were dumped next to the log."""


@dataclass
class TrainConfig:
    corpus: str = ""
    out_dir: str = "run"
    steps: int = 2000
    batch_tokens: int = 1024
    peak_lr: float = 3e-4
    warmup: int = 100
    min_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    mask_at: int | None = None
    eval_every: int = 250
    eval_frac: float = 0.02

    def validate(self, n_ctx: int) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.warmup > self.steps:
            raise ConfigError("warmup must not exceed total steps")
        if self.batch_tokens % n_ctx != 0:
            raise ConfigError(f"batch_tokens {self.batch_tokens} not divisible by context {n_ctx}")
        if not 0.0 <= self.min_lr_frac <= 1.0:
            raise ConfigError("min_lr_frac must lie in [0, 1]")


def tokenize_bytes(data: bytes) -> np.ndarray:
    """BOS followed by the raw byte values."""
    toks = np.empty(len(data) + 1, dtype=np.int32)
    toks[0] = BOS_ID
    toks[1:] = np.frombuffer(data, dtype=np.uint8)
    return toks


def ingest(corpus, n_ctx: int, seed: int) -> np.ndarray:
    """Read file(s) into shuffled (n_ctx + 1)-token training chunks.

    Each file becomes BOS + bytes; streams concatenate, the tail that does
    not fill a chunk is dropped, and chunk order is a seeded permutation.
    """
    paths = [corpus] if isinstance(corpus, (str, os.PathLike)) else list(corpus)
    streams = []
    for p in paths:
        with open(p, "rb") as fh:
            streams.append(tokenize_bytes(fh.read()))
    stream = np.concatenate(streams) if streams else np.empty(0, dtype=np.int32)
    span = n_ctx + 1
    n_chunks = len(stream) // span
    if n_chunks == 0:
        raise ValueError(f"corpus too small: {len(stream)} tokens < one chunk of {span}")
    chunks = stream[: n_chunks * span].reshape(n_chunks, span)
    order = np.random.default_rng(seed).permutation(n_chunks)
    return chunks[order]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to min_lr_frac * peak."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    floor = cfg.min_lr_frac * cfg.peak_lr
    span = max(cfg.steps - cfg.warmup, 1)
    progress = min((step - cfg.warmup) / span, 1.0)
    return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def mask_at_insert(batch: np.ndarray, k: int, n_ctx: int) -> np.ndarray:
    """Replace position ``k`` of every chunk with the reserved mask id."""
    if not 2 <= k < n_ctx:
        raise ConfigError(f"mask position {k} outside [2, {n_ctx})")
    out = batch.copy()
    out[:, k] = MASK_ID
    return out


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Parameters whose name ends in one of ``NO_DECAY_SUFFIXES`` are exempt
    from decay; frozen tensors (requires_grad False) are skipped entirely.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.95, eps=1e-8,
                 weight_decay=0.01):
        self.items = [(name, t) for name, t in params.items() if t.requires_grad]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.items}
        self.v = {name: np.zeros_like(t.data) for name, t in self.items}

    def decayed(self, name: str) -> bool:
        return self.weight_decay > 0 and not name.endswith(NO_DECAY_SUFFIXES)

    def clip_grads(self, max_norm: float) -> float:
        """Scale all grads so their global L2 norm is at most ``max_norm``."""
        total = 0.0
        for _, t in self.items:
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            factor = max_norm / norm
            for _, t in self.items:
                if t.grad is not None:
                    t.grad *= factor
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, t in self.items:
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.decayed(name):
                update = update + self.weight_decay * t.data
            t.data -= (lr * update).astype(t.data.dtype, copy=False)

    def zero_grads(self) -> None:
        for _, t in self.items:
            t.grad = None


def mean_nll(model: TransformerLM, chunks: np.ndarray, *, batch_size: int = 16,
             max_len: int | None = None) -> float:
    """Mean per-token negative log-likelihood over (N, len+1) eval chunks."""
    total, count = 0.0, 0
    for i in range(0, len(chunks), batch_size):
        part = chunks[i:i + batch_size]
        loss = model.loss(part[:, :-1], part[:, 1:], max_len=max_len)
        n_tok = part[:, 1:].size
        total += loss.item() * n_tok
        count += n_tok
    return total / count


@dataclass
class TrainResult:
    checkpoint: str
    final_loss: float
    final_eval_loss: float
    steps: int
    history: list[tuple[int, float, float]]  # (step, loss, lr)


def _dump_divergence(out_dir: str, step: int, loss: float, optimizer: AdamW) -> str:
    path = os.path.join(out_dir, "divergence.json")
    grads = {
        name: float(np.abs(t.grad).max()) if t.grad is not None else None
        for name, t in optimizer.items
    }
    with open(path, "w") as fh:
        json.dump({"step": step, "loss": loss, "max_abs_grad": grads}, fh, indent=1)
    return path


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, *, quiet: bool = True) -> TrainResult:
    """Train a model from scratch; returns paths and final losses.

    Writes to out_dir: train_log.csv (step, loss, lr, wallclock),
    eval_log.csv (step, eval_loss, eval_ppl), run_meta.json, checkpoint.bin.
    Fully deterministic for a fixed (seed, config, corpus) on one platform.
    """
    train_cfg.validate(model_cfg.n_ctx)
    if train_cfg.mask_at is not None and not model_cfg.mask_token:
        raise ConfigError("mask_at requires the model's mask_token vocabulary flag")
    os.makedirs(train_cfg.out_dir, exist_ok=True)

    chunks = ingest(train_cfg.corpus, model_cfg.n_ctx, train_cfg.seed)
    n_eval = max(2, int(round(len(chunks) * train_cfg.eval_frac)))
    if n_eval >= len(chunks):
        raise ConfigError("corpus too small to hold out an eval split")
    eval_chunks = chunks[-n_eval:]
    train_chunks = chunks[:-n_eval]
    batch_size = train_cfg.batch_tokens // model_cfg.n_ctx

    model = TransformerLM(model_cfg)
    optimizer = AdamW(model.parameters(), beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                      weight_decay=train_cfg.weight_decay)

    with open(os.path.join(train_cfg.out_dir, "run_meta.json"), "w") as fh:
        json.dump({
            "model": asdict(model_cfg),
            "train": asdict(train_cfg),
            "normalizer": model_cfg.normalizer,
            "positional": model_cfg.positional,
            "rope_base": model_cfg.rope_base,
            "effective_window": model.window,
            "ffn_activation": "tanh_gelu",
            "chunks": {"train": len(train_chunks), "eval": len(eval_chunks)},
        }, fh, indent=1)

    history: list[tuple[int, float, float]] = []
    eval_loss = float("nan")
    t0 = time.perf_counter()
    log_path = os.path.join(train_cfg.out_dir, "train_log.csv")
    eval_path = os.path.join(train_cfg.out_dir, "eval_log.csv")

    def run_eval(step: int, writer) -> float:
        el = mean_nll(model, eval_chunks, batch_size=batch_size)
        writer.writerow([step, repr(el), repr(math.exp(el))])
        return el

    with open(log_path, "w", newline="") as log_fh, open(eval_path, "w", newline="") as ev_fh:
        log = csv.writer(log_fh)
        log.writerow(["step", "loss", "lr", "wallclock"])
        ev = csv.writer(ev_fh)
        ev.writerow(["step", "eval_loss", "eval_ppl"])

        epoch, cursor = 0, 0
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_chunks))
        for step in range(train_cfg.steps):
            if cursor + batch_size > len(order):
                epoch += 1
                cursor = 0
                order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_chunks))
            batch = train_chunks[order[cursor:cursor + batch_size]]
            cursor += batch_size
            if train_cfg.mask_at is not None:
                batch = mask_at_insert(batch, train_cfg.mask_at, model_cfg.n_ctx)

            with Tape() as tape:
                loss = model.loss(batch[:, :-1], batch[:, 1:])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                dump = _dump_divergence(train_cfg.out_dir, step, loss_val, optimizer)
                raise TrainingDiverged(f"non-finite loss {loss_val} at step {step}; see {dump}")
            backward(tape, loss)
            optimizer.clip_grads(train_cfg.grad_clip)
            lr = lr_at(step, train_cfg)
            optimizer.step(lr)
            optimizer.zero_grads()

            history.append((step, loss_val, lr))
            log.writerow([step, repr(loss_val), repr(lr), repr(time.perf_counter() - t0)])
            if train_cfg.eval_every > 0 and (step + 1) % train_cfg.eval_every == 0:
                eval_loss = run_eval(step, ev)
                if not quiet:
                    print(f"step {step}: loss {loss_val:.4f} eval {eval_loss:.4f}")
        if train_cfg.eval_every <= 0 or train_cfg.steps % train_cfg.eval_every != 0:
            eval_loss = run_eval(train_cfg.steps - 1, ev)

    ckpt = os.path.join(train_cfg.out_dir, "checkpoint.bin")
    save_checkpoint(model, ckpt, step=train_cfg.steps,
                    metrics={"train_loss": history[-1][1], "eval_loss": eval_loss})
    return TrainResult(checkpoint=ckpt, final_loss=history[-1][1],
                       final_eval_loss=eval_loss, steps=train_cfg.steps, history=history)


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in ModelConfig.__dataclass_fields__.values()}
_TRAIN_KEYS = {f.name for f in TrainConfig.__dataclass_fields__.values()}


def parse_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return target_type(value)


def build_configs(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key/value mapping into model and train configurations."""
    model_kwargs, train_kwargs = {}, {}
    for key, value in kv.items():
        if key in _MODEL_KEYS:
            fields = ModelConfig.__dataclass_fields__
            target = model_kwargs
        elif key in _TRAIN_KEYS:
            fields = TrainConfig.__dataclass_fields__
            target = train_kwargs
        else:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = fields[key].type
        if key == "mask_at":
            target[key] = None if value.lower() in ("none", "") else int(value)
            continue
        base = {"int": int, "float": float, "str": str, "bool": bool}.get(ftype, str)
        try:
            target[key] = _coerce(value, base)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
