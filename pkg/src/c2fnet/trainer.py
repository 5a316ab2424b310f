"""Training loop, adaptive-moment optimizer, LR schedule, and checkpoints.

Reproducibility rules: every random draw is a counter-based hash of
(seed, purpose, counter), and the whole training state is rounded through
single precision at each epoch boundary, so a saved checkpoint restarts the
run bit-for-bit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .blocks import C2FNet
from .datagen import DataError, load_pairs, mix, splitmix64
from .loss import total_loss
from .ops import interp_matrix
from .tensor import Graph, backward, stable_sigmoid, tensor

TAG_SCALE = 101
TAG_ORDER = 102


class ConfigError(ValueError):
    """Bad training configuration or config file."""


class CorruptCheckpointError(RuntimeError):
    """Checkpoint bytes do not parse; message carries the byte offset."""


def round32(x: float) -> int:
    """Nearest multiple of 32, halves rounding up, floor of 32."""
    return max(32, int(x / 32.0 + 0.5) * 32)


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    lr_decay_factor: float = 10.0
    decay_epoch: int = 30
    epochs: int = 100
    batch_size: int = 4
    input_size: int = 64
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    checkpoint_every: int = 1
    model_seed: int = 0
    widths: tuple[int, ...] = (16, 24, 32, 48, 64)
    fused_channels: int = 64
    refine_channels: int = 32
    refine_out: int = 16
    reduction: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.input_size < 32:
            raise ConfigError("epochs, batch_size and input_size must be positive (input >= 32)")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        for s in self.scales:
            if round32(self.input_size * s) < 32:
                raise ConfigError(f"scale {s} shrinks input {self.input_size} below 32")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
        spec = {f.name: f for f in fields(cls)}
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in spec:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _parse_value(key, raw, spec[key].type, path, lineno)
        return cls(**values)


def _parse_value(key, raw, ftype, path, lineno):
    try:
        if "tuple" in str(ftype):
            parts = [p for p in raw.replace(",", " ").split() if p]
            if key in ("widths",):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        if "int" in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base rate, divided by the decay factor from decay_epoch on."""
    if epoch < 0:
        raise ConfigError(f"negative epoch {epoch}")
    return cfg.base_lr if epoch < cfg.decay_epoch else cfg.base_lr / cfg.lr_decay_factor


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """Exponential-moment state per parameter, plus the shared step count."""

    def __init__(self, named_params):
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.step = 0


def optimizer_step(named_params, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected adaptive-moment update; grads of None count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr != 0.0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"C2FK"
_VERSION = 1


def save_checkpoint(path, entries) -> None:
    """Write named float32 arrays: magic, version, count, then per entry
    (name length, name, rank, dims, payload), all little-endian."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    entries = list(entries)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<I", raw.ndim)
        blob += struct.pack(f"<{raw.ndim}I", *raw.shape)
        blob += raw.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns ordered (name, float64 array) pairs."""
    with open(path, "rb") as f:
        blob = f.read()

    def need(n, what):
        if offset + n > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated {what} at byte {offset}")

    offset = 0
    need(4, "magic")
    if blob[:4] != _MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic at byte 0")
    offset = 4
    need(4, "version")
    (version,) = struct.unpack_from("<I", blob, offset)
    if version != _VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version} at byte {offset}")
    offset += 4
    need(4, "entry count")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    entries = []
    for _ in range(count):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(name_len, "name")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(4 * size, f"payload of {name!r}")
        payload = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        entries.append((name, payload.reshape(dims).astype(np.float64)))
    return entries


def model_checkpoint_entries(model: C2FNet, opt: AdamState, epoch: int):
    entries = [("meta.arch", np.array(model.arch_meta(), dtype=np.float64)),
               ("meta.epoch", np.array([epoch], dtype=np.float64)),
               ("meta.opt_step", np.array([opt.step], dtype=np.float64))]
    entries += model.state_entries()
    for name, _ in model.named_parameters():
        entries.append((f"opt.m.{name}", opt.m[name]))
        entries.append((f"opt.v.{name}", opt.v[name]))
    return entries


def build_model_from_entries(entries) -> tuple[C2FNet, AdamState, int]:
    table = dict(entries)
    if "meta.arch" not in table:
        raise CorruptCheckpointError("checkpoint lacks a meta.arch entry")
    arch = [int(v) for v in table["meta.arch"]]
    model = C2FNet(
        seed=0,
        widths=tuple(arch[:5]),
        fused_channels=arch[5],
        refine_channels=arch[6],
        refine_out=arch[7],
        reduction=arch[8],
    )
    model.load_state_entries(table)
    opt = AdamState(list(model.named_parameters()))
    for name, _ in model.named_parameters():
        mkey, vkey = f"opt.m.{name}", f"opt.v.{name}"
        if mkey in table:
            opt.m[name][...] = table[mkey]
            opt.v[name][...] = table[vkey]
    opt.step = int(table.get("meta.opt_step", [0])[0])
    epoch = int(table.get("meta.epoch", [0])[0])
    return model, opt, epoch


def _quantize_state(model: C2FNet, opt: AdamState) -> None:
    """Round all training state through float32 so checkpoints are lossless."""
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for _, buf in model.named_buffers():
        buf[...] = buf.astype(np.float32).astype(np.float64)
    for table in (opt.m, opt.v):
        for key in table:
            table[key] = table[key].astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# resizing helpers
# ---------------------------------------------------------------------------


def _resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) array."""
    h, w = arr.shape[1], arr.shape[2]
    if (h, w) == (size, size):
        return arr
    rh = interp_matrix(h, size)
    rw = interp_matrix(w, size)
    out = np.einsum("ph,chw->cpw", rh, arr, optimize=True)
    return np.einsum("qw,cpw->cpq", rw, out, optimize=True)


def _resize_mask(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize of a (1, h, w) binary mask (stays binary)."""
    h, w = arr.shape[1], arr.shape[2]
    if (h, w) == (size, size):
        return arr
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return arr[:, ri[:, None], ci[None, :]]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    scale: float
    loss_total: float
    loss_coarse: float
    loss_final: float


@dataclass
class TrainResult:
    trace: list[TraceRow] = field(default_factory=list)
    final_checkpoint: str = ""
    trace_path: str = ""


def _write_trace(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step\tscale\tloss_total\tloss_fd\tloss_p\n")
        for r in rows:
            f.write(f"{r.step}\t{r.scale:g}\t{r.loss_total:.10g}\t{r.loss_coarse:.10g}\t{r.loss_final:.10g}\n")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    keys = splitmix64(np.arange(n, dtype=np.uint64) ^ np.uint64(mix(seed, TAG_ORDER, epoch)))
    return np.argsort(keys, kind="stable")


def draw_scale(seed: int, step: int, scales) -> float:
    u = int(splitmix64(np.uint64(mix(seed, TAG_SCALE, step)))) % len(scales)
    return scales[u]


def train(cfg: TrainConfig, manifest_path, out_dir, resume_from=None) -> TrainResult:
    """Run the optimization loop; returns the loss trace and checkpoint path.

    Fully determined by (cfg, manifest): batch order, scale draws, and
    parameter updates derive from counter-based hashing of cfg.seed.
    """
    data = load_pairs(manifest_path)
    for sid, image, mask in data:
        if image.shape[1:] != mask.shape[1:]:
            raise DataError(f"sample {sid}: image/mask size mismatch")
    os.makedirs(out_dir, exist_ok=True)

    if resume_from is not None:
        model, opt, start_epoch = build_model_from_entries(load_checkpoint(resume_from))
        start_epoch += 1
    else:
        model = C2FNet(
            seed=cfg.model_seed,
            widths=cfg.widths,
            fused_channels=cfg.fused_channels,
            refine_channels=cfg.refine_channels,
            refine_out=cfg.refine_out,
            reduction=cfg.reduction,
        )
        opt = AdamState(list(model.named_parameters()))
        start_epoch = 0

    named = list(model.named_parameters())
    params = [p for _, p in named]
    n = len(data)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    result = TrainResult()
    step = start_epoch * steps_per_epoch

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = _epoch_order(cfg.seed, epoch, n)
        for b in range(steps_per_epoch):
            batch_ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            scale = draw_scale(cfg.seed, step, cfg.scales)
            side = round32(cfg.input_size * scale)
            images = np.stack([_resize_image(data[i][1], side) for i in batch_ids])
            masks = np.stack([_resize_mask(data[i][2], side) for i in batch_ids])

            model.zero_grad()
            graph = Graph()
            outputs = model.forward(tensor(images), graph=graph, training=True)
            loss, parts = total_loss(outputs.f_d, outputs.p, masks, graph)
            backward(graph, loss)
            clip_gradients(params, cfg.clip_norm)
            optimizer_step(named, opt, lr, cfg.beta1, cfg.beta2, cfg.eps)

            result.trace.append(
                TraceRow(
                    step=step,
                    scale=scale,
                    loss_total=parts.total,
                    loss_coarse=parts.bce_coarse + parts.iou_coarse,
                    loss_final=parts.bce_final + parts.iou_final,
                )
            )
            step += 1

        _quantize_state(model, opt)
        entries = model_checkpoint_entries(model, opt, epoch)
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), entries)
        if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt"), entries)

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final_path, model_checkpoint_entries(model, opt, cfg.epochs - 1))
    result.final_checkpoint = final_path
    result.trace_path = os.path.join(out_dir, "trace.tsv")
    _write_trace(result.trace_path, result.trace)
    return result


def predict(checkpoint_path, manifest_path, out_dir):
    """Eval-mode forward over a manifest; writes one 8-bit sigmoid map PNG
    per sample (round(255 * sigmoid(logits)) at input resolution)."""
    from .png_io import write_png

    model, _, _ = build_model_from_entries(load_checkpoint(checkpoint_path))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for sid, image, _ in load_pairs(manifest_path):
        out = model.forward(tensor(image[None]), graph=None, training=False)
        prob = stable_sigmoid(out.p.data[0, 0])
        path = os.path.join(out_dir, f"{sid}.png")
        write_png(path, np.round(prob * 255.0).astype(np.uint8))
        written.append(path)
    return written
