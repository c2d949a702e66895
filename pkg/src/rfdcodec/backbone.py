"""Hyperprior-style codec backbone.

Four stride-2 analysis stages (the first two are the frozen front shared
with dictionary construction), a bottleneck projection, mirrored synthesis,
and a hyperprior side channel that conditions the Gaussian-mixture entropy
model of the latent. Checkpoints are a versioned binary of named float32
blocks so the file bytes, and therefore the SHA-256 fingerprint, are
deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .entropy import SIGMA_FLOOR, GmmParams, gmm_likelihood_torch
from .errors import CheckpointFormatError


@dataclass
class BackboneConfig:
    channel_width: int = 192
    bottleneck: int = 64
    hyper_width: int = 64
    gmm_components: int = 3

    def __post_init__(self):
        if not (self.channel_width >= self.bottleneck >= 1):
            raise ValueError("need channel_width >= bottleneck >= 1")
        if self.hyper_width < 1 or self.gmm_components < 1:
            raise ValueError("hyper_width and gmm_components must be positive")


NUM_STAGES = 4  # total stride-2 analysis stages; scales tap stages 2..4
FROZEN_STAGES = ("stage1", "stage2")


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=5, stride=2, padding=2)


def _deconv(cin, cout):
    return nn.ConvTranspose2d(cin, cout, kernel_size=5, stride=2, padding=2, output_padding=1)


class AnalysisTransform(nn.Module):
    """Image -> staged features -> bottleneck latent. Stage s output sits on
    the H/2**s grid; the dictionary taps stages 2..4."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.channel_width
        self.stage1 = nn.Sequential(_conv(3, c), nn.LeakyReLU(0.2))
        self.stage2 = nn.Sequential(_conv(c, c), nn.LeakyReLU(0.2))
        self.stage3 = nn.Sequential(_conv(c, c), nn.LeakyReLU(0.2))
        self.stage4 = nn.Sequential(_conv(c, c), nn.LeakyReLU(0.2))
        self.project = nn.Conv2d(c, cfg.bottleneck, kernel_size=3, stride=1, padding=1)

    def stage(self, s: int) -> nn.Module:
        return getattr(self, f"stage{s}")

    def features_at_scale(self, x: torch.Tensor, scale: int) -> torch.Tensor:
        """Run stages 1..scale (2 <= scale <= 4)."""
        if not 2 <= scale <= NUM_STAGES:
            raise ValueError(f"scale must be in [2, {NUM_STAGES}], got {scale}")
        out = x
        for s in range(1, scale + 1):
            out = self.stage(s)(out)
        return out


class SynthesisTransform(nn.Module):
    """Mirror of the analysis path; reference features are added back
    between the upsampling stages by the caller."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.channel_width
        self.unproject = nn.Conv2d(cfg.bottleneck, c, kernel_size=3, stride=1, padding=1)
        self.up43 = nn.Sequential(_deconv(c, c), nn.LeakyReLU(0.2))
        self.up32 = nn.Sequential(_deconv(c, c), nn.LeakyReLU(0.2))
        self.up21 = nn.Sequential(_deconv(c, c), nn.LeakyReLU(0.2))
        self.up10 = _deconv(c, 3)


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.hyper_width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.bottleneck, ch, 3, stride=1, padding=1),
            nn.LeakyReLU(0.2),
            _conv(ch, ch),
            nn.LeakyReLU(0.2),
            _conv(ch, ch),
        )

    def forward(self, z):
        return self.net(z)


class HyperSynthesis(nn.Module):
    """Hyper latent -> per-element mixture parameters for the latent."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.hyper_width
        self.k = cfg.gmm_components
        self.bottleneck = cfg.bottleneck
        self.net = nn.Sequential(
            _deconv(ch, ch),
            nn.LeakyReLU(0.2),
            _deconv(ch, ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, 3 * self.k * cfg.bottleneck, 3, stride=1, padding=1),
        )

    def forward(self, hz: torch.Tensor, latent_hw: tuple[int, int]):
        """Returns (weights, means, scales), each (k, B, Cz, h, w)."""
        out = self.net(hz)
        out = out[:, :, : latent_hw[0], : latent_hw[1]]
        b, _, h, w = out.shape
        out = out.reshape(b, 3, self.k, self.bottleneck, h, w)
        raw_w, means, raw_s = out[:, 0], out[:, 1], out[:, 2]
        weights = torch.softmax(raw_w, dim=1).permute(1, 0, 2, 3, 4)
        means = means.permute(1, 0, 2, 3, 4)
        scales = (SIGMA_FLOOR + F.softplus(raw_s)).permute(1, 0, 2, 3, 4)
        return weights, means, scales


class ChannelGaussian(nn.Module):
    """Learnable per-channel discretized Gaussian for side streams
    (hyper latent, dependency-map symbols)."""

    def __init__(self, channels: int, init_mean: float = 0.0, init_sigma: float = 8.0):
        super().__init__()
        self.mean = nn.Parameter(torch.full((channels,), float(init_mean)))
        raw = float(np.log(np.expm1(max(init_sigma - SIGMA_FLOOR, 1e-4))))
        self.sigma_raw = nn.Parameter(torch.full((channels,), raw))

    def sigma(self) -> torch.Tensor:
        return SIGMA_FLOOR + F.softplus(self.sigma_raw)

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        """values: (B, C, h, w); per-channel parameters broadcast."""
        mu = self.mean.reshape(1, 1, -1, 1, 1)
        sg = self.sigma().reshape(1, 1, -1, 1, 1)
        w = torch.ones_like(mu)
        return gmm_likelihood_torch(values, w, mu, sg)

    def export_params(self) -> list[GmmParams]:
        """One single-component GmmParams per channel, for the range coder."""
        mu = self.mean.detach().cpu().numpy().astype(np.float64)
        sg = self.sigma().detach().cpu().numpy().astype(np.float64)
        return [
            GmmParams(weights=[[1.0]], means=[[m]], scales=[[s]])
            for m, s in zip(mu, sg)
        ]


def gmm_params_to_numpy(weights, means, scales) -> GmmParams:
    """Flatten (k, 1, Cz, h, w) torch mixture tensors to per-element rows."""
    k = weights.shape[0]
    w = weights.detach().cpu().numpy().reshape(k, -1).T.astype(np.float64)
    m = means.detach().cpu().numpy().reshape(k, -1).T.astype(np.float64)
    s = scales.detach().cpu().numpy().reshape(k, -1).T.astype(np.float64)
    # renormalize float32 softmax output to the coder's 1e-6 simplex contract
    w = w / w.sum(axis=1, keepdims=True)
    s = np.maximum(s, SIGMA_FLOOR)
    return GmmParams(weights=w, means=m, scales=s)


# --- checkpoint I/O ---

CKPT_MAGIC = b"RFDM"
CKPT_VERSION = 1


def save_checkpoint(path, config: dict, extra: dict, state: dict) -> None:
    """Versioned binary: magic, version, sorted-key JSON config and extra
    blocks, then named float32 little-endian tensors sorted by name."""
    blobs = []
    for name in sorted(state):
        arr = np.ascontiguousarray(
            state[name].detach().cpu().numpy()
            if isinstance(state[name], torch.Tensor)
            else state[name],
            dtype="<f4",
        )
        blobs.append((name, arr))

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        for payload in (config, extra):
            raw = json.dumps(payload, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    if data[4] != CKPT_VERSION:
        raise CheckpointFormatError(f"unknown checkpoint version {data[4]}")
    pos = 5
    try:
        payloads = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            payloads.append(json.loads(data[pos : pos + n].decode("utf-8")))
            pos += n
        config, extra = payloads
        (n_blocks,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            state[name] = arr.copy()
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"truncated or malformed checkpoint: {exc}") from exc
    return config, extra, state


def file_fingerprint(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def state_hash(named_tensors: dict) -> str:
    """Order-independent hash of named tensors (frozen-front audits)."""
    digest = hashlib.sha256()
    for name in sorted(named_tensors):
        t = named_tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.hexdigest()
