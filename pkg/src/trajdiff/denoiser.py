"""Conditional noise predictor: a 1-D U-Net over the trajectory time axis.

The decision vector ``(t, u_1, ..., u_T)`` is laid out as ``c`` control
channels over ``T`` steps plus one channel carrying the duration ``t``
broadcast along the axis. The network sees a sinusoidal embedding of the
diffusion step and an MLP embedding of the condition; the null condition is
a learned vector in the same embedding space.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import MissingFileError, ShapeMismatchError, VersionMismatchError

CHECKPOINT_VERSION = 1

FULL_HIDDEN = (512, 512, 1024)
FULL_COND = (256, 512)
DESK_HIDDEN = (64, 64, 128)
DESK_COND = (32, 64)


@dataclass(frozen=True)
class DenoiserConfig:
    input_dim: int
    condition_dim: int
    horizon: int
    hidden_widths: tuple = DESK_HIDDEN
    cond_encoder_widths: tuple = DESK_COND
    time_embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "cond_encoder_widths", tuple(int(w) for w in self.cond_encoder_widths))
        if len(self.hidden_widths) != 3 or len(self.cond_encoder_widths) != 2:
            raise ValueError("need three hidden widths and two condition-encoder widths")
        if min(self.hidden_widths + self.cond_encoder_widths) < 1 or self.time_embed_dim < 2:
            raise ValueError("widths must be >= 1 and time_embed_dim >= 2")
        if self.horizon < 1 or (self.input_dim - 1) % self.horizon or self.input_dim <= 1:
            raise ValueError(f"input_dim {self.input_dim} is not 1 + c * horizon({self.horizon})")

    @property
    def channels(self) -> int:
        return (self.input_dim - 1) // self.horizon

    @classmethod
    def for_task(cls, task, desk_scale: bool = True, **overrides) -> "DenoiserConfig":
        kw = dict(
            input_dim=task.dim,
            condition_dim=task.param_dim,
            horizon=task.horizon,
            hidden_widths=DESK_HIDDEN if desk_scale else FULL_HIDDEN,
            cond_encoder_widths=DESK_COND if desk_scale else FULL_COND,
            time_embed_dim=64 if desk_scale else 128,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["cond_encoder_widths"] = list(self.cond_encoder_widths)
        return d


def _groups(ch: int) -> int:
    # at least two channels per group, otherwise the norm erases the per-channel embedding shift
    return next(g for g in (8, 4, 2, 1) if ch % g == 0 and (ch // g >= 2 or g == 1))


def sinusoidal_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = k.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """``eps_theta(x_k, k, y)`` with classifier-free null-condition support."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c_io = config.channels + 1
        w1, w2, w3 = config.hidden_widths
        e = config.time_embed_dim
        c1, c2 = config.cond_encoder_widths

        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.cond_mlp = nn.Sequential(
            nn.Linear(config.condition_dim, c1), nn.SiLU(), nn.Linear(c1, c2), nn.SiLU(), nn.Linear(c2, e)
        )
        self.null_embedding = nn.Parameter(torch.zeros(e))

        self.inp = nn.Conv1d(c_io, w1, 3, padding=1)
        self.enc0 = ResBlock1d(w1, w1, e)
        self.down0 = nn.Conv1d(w1, w1, 3, stride=2, padding=1)
        self.enc1 = ResBlock1d(w1, w2, e)
        self.down1 = nn.Conv1d(w2, w2, 3, stride=2, padding=1)
        self.mid = ResBlock1d(w2, w3, e)
        self.up1 = nn.Conv1d(w3, w2, 3, padding=1)
        self.dec1 = ResBlock1d(2 * w2, w2, e)
        self.up0 = nn.Conv1d(w2, w1, 3, padding=1)
        self.dec0 = ResBlock1d(2 * w1, w1, e)
        self.out_norm = nn.GroupNorm(_groups(w1), w1)
        self.out = nn.Conv1d(w1, c_io, 1)

    def embed(self, k, y, null_mask=None):
        b = k.shape[0]
        dtype = self.null_embedding.dtype
        emb = self.time_mlp(sinusoidal_embedding(k, self.config.time_embed_dim).to(dtype))
        null = self.null_embedding.expand(b, -1)
        if y is None:
            return emb + null
        cond = self.cond_mlp(y.to(dtype))
        if null_mask is not None:
            cond = torch.where(null_mask[:, None], null, cond)
        return emb + cond

    def forward(self, x, k, y=None, null_mask=None):
        """Predict noise for ``x`` (B, n) at steps ``k`` (B,) under condition ``y``.

        ``y=None`` selects the null condition for every row; ``null_mask``
        selects it for a subset of rows.
        """
        cfg = self.config
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
            y = None if y is None else y[None]
        if x.shape[-1] != cfg.input_dim:
            raise ShapeMismatchError(f"expected input width {cfg.input_dim}, got {x.shape[-1]}")
        if y is not None and y.shape[-1] != cfg.condition_dim:
            raise ShapeMismatchError(f"expected condition width {cfg.condition_dim}, got {y.shape[-1]}")
        b, T = x.shape[0], cfg.horizon
        k = torch.as_tensor(k, dtype=torch.long).reshape(-1).expand(b) if not torch.is_tensor(k) or k.ndim == 0 else k
        emb = self.embed(k, y, null_mask)

        ctrl = x[:, 1:].reshape(b, T, cfg.channels).transpose(1, 2)
        h = torch.cat([ctrl, x[:, :1, None].expand(b, 1, T)], dim=1)
        h0 = self.enc0(self.inp(h), emb)
        h1 = self.enc1(self.down0(h0), emb)
        m = self.mid(self.down1(h1), emb)
        u = self.up1(F.interpolate(m, size=h1.shape[-1], mode="nearest"))
        u = self.dec1(torch.cat([u, h1], dim=1), emb)
        u = self.up0(F.interpolate(u, size=h0.shape[-1], mode="nearest"))
        u = self.dec0(torch.cat([u, h0], dim=1), emb)
        out = self.out(F.silu(self.out_norm(u)))

        eps_t = out[:, -1].mean(dim=1, keepdim=True)
        eps_u = out[:, :-1].transpose(1, 2).reshape(b, -1)
        res = torch.cat([eps_t, eps_u], dim=1)
        return res[0] if squeeze else res


def init(config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Build a denoiser with fan-in scaled normal weights and zero biases."""
    model = Denoiser(config).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "null_embedding":
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype))
            elif ".norm" in name or name.startswith("out_norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) / math.sqrt(fan_in))
    return model


def predict_noise(model: Denoiser, x_k, k, y_or_null):
    return model(x_k, k, y_or_null)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Denoiser, path, provenance: dict | None = None) -> Path:
    """Write ``meta.json`` + ``params.f32`` atomically (temp dir, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    blocks, chunks = [], []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        blocks.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "provenance": provenance or {},
        "blocks": blocks,
        "n_params": int(flat.size),
    }
    (tmp / "params.f32").write_bytes(flat.tobytes())
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def read_checkpoint_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise MissingFileError(f"missing file: {meta_path}")
    return json.loads(meta_path.read_text())


def load_checkpoint(path, expected: DenoiserConfig | None = None) -> Denoiser:
    path = Path(path)
    meta = read_checkpoint_meta(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {meta.get('format_version')!r} unsupported")
    config = DenoiserConfig(**meta["config"])
    if expected is not None and (
        (config.input_dim, config.condition_dim, config.horizon)
        != (expected.input_dim, expected.condition_dim, expected.horizon)
    ):
        raise ShapeMismatchError(
            f"checkpoint dims (n={config.input_dim}, k={config.condition_dim}, T={config.horizon}) "
            f"do not match expected (n={expected.input_dim}, k={expected.condition_dim}, T={expected.horizon})"
        )
    params_path = path / "params.f32"
    if not params_path.is_file():
        raise MissingFileError(f"missing file: {params_path}")
    flat = np.frombuffer(params_path.read_bytes(), dtype="<f4")
    if flat.size != meta["n_params"]:
        raise ShapeMismatchError(f"params.f32 holds {flat.size} values, meta declares {meta['n_params']}")
    model = Denoiser(config)
    ref = model.state_dict()
    state, offset = {}, 0
    for block in meta["blocks"]:
        name, shape = block["name"], tuple(block["shape"])
        if name not in ref or tuple(ref[name].shape) != shape:
            raise ShapeMismatchError(f"block {name} with shape {shape} does not fit the architecture")
        size = int(np.prod(shape))
        state[name] = torch.from_numpy(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    if set(state) != set(ref):
        raise ShapeMismatchError("checkpoint blocks do not cover the architecture")
    model.load_state_dict(state)
    return model
