"""Reference-path network: style normalization, feature match, morphing.

Encoding walks the analysis stages and, at each reference scale, matches
the input features against the style-normalized dictionary, morphs the
selected entry with a dependency-map-driven spatially variant recursive
filter, and carries the residual forward. The decoder rebuilds the same
references from the transmitted index, quantized dependency map, and
transmitted priors, so encoder-side and decoder-side reconstructions are
bit-identical given identical symbols.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import backbone as bb
from .entropy import (
    SIGMA_FLOOR,
    gmm_likelihood_torch,
    np_round_half_away,
    quantize,
)
from .errors import FingerprintMismatchError
from .physical import EPS_T

PAD_MULTIPLE = 16


@dataclass
class RfdConfig:
    channel_width: int = 192
    bottleneck: int = 64
    hyper_width: int = 64
    gmm_components: int = 3
    scales: tuple = (2, 3, 4)
    usnb: bool = True
    rfvm: bool = True
    w_groups: int = 4
    w_bits: int = 6
    usnb_hidden: int = 12
    dep_width: int = 0  # 0 -> derived from channel width

    def __post_init__(self):
        self.scales = tuple(sorted(int(s) for s in self.scales))
        if any(s not in (2, 3, 4) for s in self.scales):
            raise ValueError("reference scales must be within {2, 3, 4}")
        if self.channel_width % self.w_groups:
            raise ValueError("channel_width must be divisible by w_groups")
        if self.usnb_hidden < 6:
            raise ValueError("usnb_hidden must be at least 6")
        if not self.dep_width:
            self.dep_width = max(4, self.channel_width // 8)

    def backbone(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(
            channel_width=self.channel_width,
            bottleneck=self.bottleneck,
            hyper_width=self.hyper_width,
            gmm_components=self.gmm_components,
        )

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "RfdConfig":
        d = dict(d)
        d["scales"] = tuple(d.get("scales", (2, 3, 4)))
        return cls(**d)


class StyleNormalizer(nn.Module):
    """Normalizes dictionary-entry style toward the input's priors.

    One shared convolutional branch embeds a (T, A) pair; the input-side
    and dictionary-side priors go through the identical weights. The fused
    output follows the scattering-model data flow: restore the entry with
    the dictionary priors, re-degrade it with the input priors.
    """

    def __init__(self, hidden: int = 12):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(6, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 6, 3, padding=1),
        )

    @property
    def input_branch(self) -> nn.Module:
        return self.branch

    @property
    def dictionary_branch(self) -> nn.Module:
        return self.branch

    def set_identity(self) -> None:
        """Configure the branch to pass (T, A) through unchanged."""
        conv_in, _, conv_out = self.branch
        with torch.no_grad():
            conv_in.weight.zero_()
            conv_in.bias.zero_()
            conv_out.weight.zero_()
            conv_out.bias.zero_()
            for i in range(6):
                conv_in.weight[i, i, 1, 1] = 1.0
                conv_out.weight[i, i, 1, 1] = 1.0

    def _embed(self, t_map: torch.Tensor, a_map: torch.Tensor):
        out = self.branch(torch.cat([t_map, a_map], dim=1))
        t = torch.clamp(out[:, :3].mean(dim=1, keepdim=True), EPS_T, 1.0)
        a = torch.clamp(out[:, 3:].mean(dim=1, keepdim=True), 0.0, 1.0)
        return t, a

    def forward(self, entries, t_in, a_in, t_dic, a_dic):
        ti, ai = self._embed(t_in, a_in)
        td, ad = self._embed(t_dic, a_dic)
        clear = (entries - ad * (1.0 - td)) / td
        return clear * ti + ai * (1.0 - ti)


class DependencyNet(nn.Module):
    """Parallel dilated branches over (input, reference) producing a
    per-group relevance map in (0, 1)."""

    def __init__(self, channels: int, groups: int, width: int):
        super().__init__()
        self.branches = nn.ModuleList(
            [
                nn.Conv2d(2 * channels, width, 3, padding=r, dilation=r)
                for r in (1, 2, 4)
            ]
        )
        self.fuse = nn.Conv2d(3 * width, groups, 1)

    def forward(self, feat: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if feat.shape != ref.shape:
            raise ValueError(f"feature/reference shape mismatch: {feat.shape} vs {ref.shape}")
        x = torch.cat([feat, ref], dim=1)
        taps = torch.cat([b(x) for b in self.branches], dim=1)
        return torch.sigmoid(self.fuse(F.relu(taps)))


def svr_morph(ref: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Spatially variant recursive filtering of the reference.

    Four directional passes of h[t] = w[t]*x[t] + (1-w[t])*h[t-1] with zero
    boundary state, averaged. ``w`` has one channel per group; groups tile
    the channel axis. Unit weights make this the identity.
    """
    b, c, hh, ww = ref.shape
    groups = w.shape[1]
    if c % groups:
        raise ValueError("channels must be divisible by dependency groups")
    wx = w.repeat_interleave(c // groups, dim=1)

    def scan(dim: int, reverse: bool) -> torch.Tensor:
        n = ref.shape[dim]
        idx = range(n - 1, -1, -1) if reverse else range(n)
        state = torch.zeros_like(ref.select(dim, 0))
        slots: list = [None] * n
        for i in idx:
            wi = wx.select(dim, i)
            state = wi * ref.select(dim, i) + (1.0 - wi) * state
            slots[i] = state
        return torch.stack(slots, dim=dim)

    return (scan(3, False) + scan(3, True) + scan(2, False) + scan(2, True)) / 4.0


def feature_match(feat, entries) -> tuple[int, float]:
    """Index and score of the entry with the largest normalized inner
    product against ``feat``; zero-norm entries score -inf; ties resolve to
    the lowest index."""
    if isinstance(feat, torch.Tensor):
        feat = feat.detach().cpu().numpy()
    if isinstance(entries, torch.Tensor):
        entries = entries.detach().cpu().numpy()
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim < 2 or entries.shape[0] < 1:
        raise ValueError("dictionary must hold at least one entry")
    flat = entries.reshape(entries.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    scores = np.full(entries.shape[0], -np.inf)
    nz = norms > 0
    scores[nz] = (flat[nz] / norms[nz, None]) @ np.asarray(feat, dtype=np.float64).reshape(-1)
    idx = int(np.argmax(scores))
    return idx, float(scores[idx])


@dataclass
class SymbolPack:
    """Everything the decoder needs, as integer symbols plus priors."""

    height: int
    width: int
    pad: tuple  # (top, left, bottom, right)
    scales: tuple
    a_vec: np.ndarray  # float32 (3,)
    t4_codes: np.ndarray  # uint8 (3, h4, w4)
    indices: dict  # scale -> int
    w_codes: dict  # scale -> int64 (G, h_s, w_s)
    z: np.ndarray  # int64 (Cz, H/16, W/16)
    hz: np.ndarray  # int64 (Ch, ...)


def pad_to_multiple(arr: np.ndarray, multiple: int = PAD_MULTIPLE):
    """Edge-pad H x W x C on the bottom/right; returns (padded, pad tuple)."""
    h, w = arr.shape[:2]
    pb = (-h) % multiple
    pr = (-w) % multiple
    if pb or pr:
        arr = np.pad(arr, ((0, pb), (0, pr), (0, 0)), mode="edge")
    return arr, (0, 0, pb, pr)


def quantize_t4(t4: torch.Tensor) -> np.ndarray:
    codes = np_round_half_away(t4.detach().cpu().numpy() * 255.0)
    return np.clip(codes, 0, 255).astype(np.uint8)


def dequantize_t4(codes: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(codes.astype(np.float32) / 255.0)
    return torch.clamp(t, EPS_T, 1.0)


class RfdModel(nn.Module):
    def __init__(self, cfg: RfdConfig):
        super().__init__()
        self.cfg = cfg
        bcfg = cfg.backbone()
        self.analysis = bb.AnalysisTransform(bcfg)
        self.synthesis = bb.SynthesisTransform(bcfg)
        self.hyper_a = bb.HyperAnalysis(bcfg)
        self.hyper_s = bb.HyperSynthesis(bcfg)
        self.hyper_side = bb.ChannelGaussian(cfg.hyper_width, 0.0, 4.0)
        if cfg.scales and cfg.usnb:
            self.usnb_block = StyleNormalizer(cfg.usnb_hidden)
        if cfg.scales and cfg.rfvm:
            half = float(2 ** (cfg.w_bits - 1))
            self.dep_nets = nn.ModuleDict(
                {
                    str(s): DependencyNet(cfg.channel_width, cfg.w_groups, cfg.dep_width)
                    for s in cfg.scales
                }
            )
            self.w_models = nn.ModuleDict(
                {
                    str(s): bb.ChannelGaussian(cfg.w_groups, half, half / 2)
                    for s in cfg.scales
                }
            )
        # dictionary-side priors; overwritten from dictionary metadata
        self.register_buffer("dic_T", torch.full((3,), 0.7))
        self.register_buffer("dic_A", torch.tensor([0.35, 0.55, 0.65]))
        self.backbone_fingerprint = ""
        self.index_counts: dict = {s: None for s in cfg.scales}

    # --- plumbing ---

    def front_hash(self) -> str:
        named = {
            n: p
            for n, p in self.analysis.state_dict().items()
            if n.startswith(bb.FROZEN_STAGES)
        }
        return bb.state_hash(named)

    def freeze_front(self) -> None:
        for name in bb.FROZEN_STAGES:
            for p in self.analysis.stage(int(name[-1])).parameters():
                p.requires_grad_(False)

    def set_dictionary_priors(self, dic_T, dic_A) -> None:
        with torch.no_grad():
            self.dic_T.copy_(torch.as_tensor(dic_T, dtype=torch.float32))
            self.dic_A.copy_(torch.as_tensor(dic_A, dtype=torch.float32))

    def check_dictionary(self, dictionary) -> None:
        if not self.cfg.scales:
            return
        if dictionary.backbone_fingerprint != self.backbone_fingerprint:
            raise FingerprintMismatchError(
                "dictionary was built with a different backbone than this model"
            )

    def _prior_grids(self, t4: torch.Tensor, a_vec: torch.Tensor, scale: int, hw):
        rep = 2 ** (4 - scale)
        t = t4 if rep == 1 else F.interpolate(t4, scale_factor=rep, mode="nearest-exact")
        t = t[:, :, : hw[0], : hw[1]]
        dtype = t4.dtype
        a = a_vec.reshape(1, 3, 1, 1).to(dtype).expand(1, 3, hw[0], hw[1])
        td = self.dic_T.reshape(1, 3, 1, 1).to(dtype).expand(1, 3, hw[0], hw[1])
        ad = self.dic_A.reshape(1, 3, 1, 1).to(dtype).expand(1, 3, hw[0], hw[1])
        return t, a, td, ad

    def _entries_tensor(self, dictionary, scale: int, hw, dtype) -> torch.Tensor:
        entries = torch.from_numpy(dictionary.entries[scale]).to(dtype)
        if entries.shape[-2:] != tuple(hw):
            entries = F.interpolate(entries, size=tuple(hw), mode="bilinear", align_corners=False)
        return entries

    def _normalize_entry(self, entry, t_in, a_in, t_dic, a_dic):
        if self.cfg.usnb:
            return self.usnb_block(entry, t_in, a_in, t_dic, a_dic)
        return entry

    def _match_scale(self, feat: torch.Tensor, dictionary, scale: int, t4, a_vec) -> int:
        """Pick the reference index for one scale (batch size 1)."""
        hw = feat.shape[-2:]
        grids = self._prior_grids(t4, a_vec, scale, hw)
        with torch.no_grad():
            entries = self._entries_tensor(dictionary, scale, hw, feat.dtype)
            nd = self._normalize_entry(entries, *grids)
            idx, _ = feature_match(feat[0], nd)
        return idx

    def _reference(self, feat, dictionary, scale, t4, a_vec, idx, w_hat):
        """Reconstruct RD_s from transmitted data only (both codec sides)."""
        hw = feat.shape[-2:]
        dtype = t4.dtype
        grids = self._prior_grids(t4, a_vec, scale, hw)
        entry = self._entries_tensor(dictionary, scale, hw, dtype)[idx : idx + 1]
        nd = self._normalize_entry(entry, *grids)
        if self.cfg.rfvm and w_hat is not None:
            return svr_morph(nd, w_hat)
        return nd

    # --- training path ---

    def forward_training(self, x, t4, a_vec, dictionary, generator=None):
        """Noisy-quantization forward pass for one image (batch 1).

        Returns (x_hat, rate_bits, diagnostics); rate_bits is the
        differentiable entropy estimate in bits for the whole image.
        """
        return self._forward(x, t4, a_vec, dictionary, mode="train", generator=generator)

    def encode(self, x, t4, a_vec, dictionary) -> SymbolPack:
        with torch.no_grad():
            _, _, diag = self._forward(x, t4, a_vec, dictionary, mode="infer")
        return diag["pack"]

    def decode(self, pack: SymbolPack, dictionary) -> np.ndarray:
        """Reconstruct the image from transmitted symbols alone."""
        if pack.scales:
            self.check_dictionary(dictionary)
        with torch.no_grad():
            t4 = dequantize_t4(pack.t4_codes).unsqueeze(0)
            a_vec = torch.from_numpy(pack.a_vec.astype(np.float32))
            z_hat = torch.from_numpy(pack.z.astype(np.float32)).unsqueeze(0)
            resid = self.synthesis.unproject(z_hat)
            ups = {4: self.synthesis.up43, 3: self.synthesis.up32}
            for s in (4, 3):
                if s in pack.scales:
                    rd = self._reference_from_pack(resid, pack, dictionary, s, t4, a_vec)
                    resid = resid + rd
                resid = ups[s](resid)
            if 2 in pack.scales:
                rd = self._reference_from_pack(resid, pack, dictionary, 2, t4, a_vec)
                resid = resid + rd
            out = self.synthesis.up10(self.synthesis.up21(resid))
            img = out[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
        top, left, pb, pr = pack.pad
        h = img.shape[0] - pb - top
        w = img.shape[1] - pr - left
        img = img[top : top + h, left : left + w]
        return np.clip(img, 0.0, 1.0)

    def _reference_from_pack(self, resid, pack, dictionary, scale, t4, a_vec):
        w_hat = None
        if self.cfg.rfvm:
            codes = torch.from_numpy(pack.w_codes[scale].astype(np.float32))
            w_hat = ((codes + 0.5) / float(2 ** self.cfg.w_bits)).unsqueeze(0)
        return self._reference(
            resid, dictionary, scale, t4, a_vec, pack.indices[scale], w_hat
        )

    # --- shared forward ---

    def _forward(self, x, t4, a_vec, dictionary, mode: str, generator=None):
        if mode == "infer" and torch.is_grad_enabled():
            with torch.no_grad():
                return self._forward(x, t4, a_vec, dictionary, mode, generator)
        cfg = self.cfg
        train = mode == "train"
        if cfg.scales:
            self.check_dictionary(dictionary)
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))[None]).float()
        if isinstance(a_vec, np.ndarray):
            a_vec = torch.from_numpy(a_vec.astype(np.float32))

        rate = x.new_zeros(())
        diag: dict = {
            "indices": {},
            "residual_energy": {},
            "feature_energy": {},
            "reference_energy": {},
        }
        pack_w: dict = {}
        pack_idx: dict = {}
        w_scale = float(2 ** cfg.w_bits)

        feat = self.analysis.stage2(self.analysis.stage1(x))
        rds = {}
        for s in (2, 3, 4):
            if s == 3:
                feat = self.analysis.stage3(feat)
            elif s == 4:
                feat = self.analysis.stage4(feat)
            if s not in cfg.scales:
                continue
            idx = self._match_scale(feat.detach(), dictionary, s, t4, a_vec)
            pack_idx[s] = idx
            diag["indices"][s] = idx
            hw = feat.shape[-2:]
            grids = self._prior_grids(t4, a_vec, s, hw)
            entry = self._entries_tensor(dictionary, s, hw, t4.dtype)[idx : idx + 1]
            nd = self._normalize_entry(entry, *grids)
            if cfg.rfvm:
                w_map = self.dep_nets[str(s)](feat, nd)
                w_cont = w_map * w_scale - 0.5
                if train:
                    w_noisy = quantize(w_cont, "train", generator=generator)
                    rate = rate - torch.log2(self.w_models[str(s)].likelihood(w_noisy.unsqueeze(0))).sum()
                    w_hat = (w_noisy + 0.5) / w_scale
                else:
                    codes = torch.clamp(
                        quantize(w_cont.detach(), "infer"), 0, w_scale - 1
                    )
                    pack_w[s] = codes[0].cpu().numpy().astype(np.int64)
                    w_hat = (codes + 0.5) / w_scale
                rd = svr_morph(nd, w_hat)
            else:
                rd = nd
            rds[s] = rd
            diag["feature_energy"][s] = float((feat.detach() ** 2).sum())
            diag["reference_energy"][s] = float((rd.detach() ** 2).sum())
            feat = feat - rd
            diag["residual_energy"][s] = float((feat.detach() ** 2).sum())

        z_cont = self.analysis.project(feat)
        hz_cont = self.hyper_a(z_cont)
        if train:
            z_hat = quantize(z_cont, "train", generator=generator)
            hz_hat = quantize(hz_cont, "train", generator=generator)
        else:
            z_hat = quantize(z_cont, "infer")
            hz_hat = quantize(hz_cont, "infer")
        weights, means, scales_t = self.hyper_s(hz_hat, z_cont.shape[-2:])
        rate = rate - torch.log2(gmm_likelihood_torch(z_hat, weights, means, scales_t)).sum()
        rate = rate - torch.log2(self.hyper_side.likelihood(hz_hat.unsqueeze(0))).sum()

        if train:
            resid = self.synthesis.unproject(z_hat)
            ups = {4: self.synthesis.up43, 3: self.synthesis.up32}
            for s in (4, 3):
                if s in cfg.scales:
                    resid = resid + rds[s]
                resid = ups[s](resid)
            if 2 in cfg.scales:
                resid = resid + rds[2]
            x_hat = self.synthesis.up10(self.synthesis.up21(resid))
            return x_hat, rate, diag

        pack = SymbolPack(
            height=0,
            width=0,
            pad=(0, 0, 0, 0),
            scales=cfg.scales,
            a_vec=a_vec.cpu().numpy().astype(np.float32),
            t4_codes=quantize_t4(t4[0]),
            indices=pack_idx,
            w_codes=pack_w,
            z=z_hat[0].cpu().numpy().astype(np.int64),
            hz=hz_hat[0].cpu().numpy().astype(np.int64),
        )
        diag["pack"] = pack
        return None, float(rate), diag

    # --- entropy-model exports for the range coder ---

    def z_mixture_params(self, hz_symbols: np.ndarray, latent_hw):
        hz = torch.from_numpy(hz_symbols.astype(np.float32)).unsqueeze(0)
        with torch.no_grad():
            weights, means, scales_t = self.hyper_s(hz, tuple(latent_hw))
        return bb.gmm_params_to_numpy(weights, means, scales_t)

    def hyper_side_params(self):
        return self.hyper_side.export_params()

    def w_side_params(self, scale: int):
        return self.w_models[str(scale)].export_params()


# --- image-level API ---


def prepare_image(image: np.ndarray, priors) -> tuple:
    """Pad image and priors, pool T to the scale-4 grid."""
    padded, pad = pad_to_multiple(np.asarray(image, dtype=np.float64))
    t_full, _ = pad_to_multiple(priors.T)
    t = torch.from_numpy(t_full.transpose(2, 0, 1)[None]).float()
    h4, w4 = padded.shape[0] // PAD_MULTIPLE, padded.shape[1] // PAD_MULTIPLE
    t4 = F.adaptive_avg_pool2d(t, (h4, w4))
    t4 = dequantize_t4(quantize_t4(t4[0])).unsqueeze(0)
    a_vec = np.asarray(priors.A, dtype=np.float32)
    return padded, pad, t4, a_vec


def encode_image(model: RfdModel, dictionary, image: np.ndarray, priors) -> SymbolPack:
    h, w = image.shape[:2]
    padded, pad, t4, a_vec = prepare_image(image, priors)
    pack = model.encode(padded, t4, torch.from_numpy(a_vec), dictionary)
    pack.height = h
    pack.width = w
    pack.pad = pad
    return pack


def decode_image(model: RfdModel, dictionary, pack: SymbolPack) -> np.ndarray:
    return model.decode(pack, dictionary)


# --- model persistence ---


def save_model(model: RfdModel, path, extra: dict | None = None) -> None:
    payload = {
        "backbone_fingerprint": model.backbone_fingerprint,
        "index_counts": {
            str(s): (c.tolist() if c is not None else None)
            for s, c in model.index_counts.items()
        },
    }
    if extra:
        payload.update(extra)
    bb.save_checkpoint(path, model.cfg.to_json_dict(), payload, model.state_dict())


def load_model(path) -> tuple[RfdModel, dict]:
    config, extra, state = bb.load_checkpoint(path)
    model = RfdModel(RfdConfig.from_json_dict(config))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    model.backbone_fingerprint = extra.get("backbone_fingerprint", "")
    counts = extra.get("index_counts") or {}
    model.index_counts = {
        int(s): (np.asarray(v, dtype=np.int64) if v is not None else None)
        for s, v in counts.items()
    }
    for s in model.cfg.scales:
        model.index_counts.setdefault(s, None)
    model.eval()
    return model, extra


def model_from_backbone(
    backbone_path,
    scales=(2, 3, 4),
    usnb: bool = True,
    rfvm: bool = True,
    dictionary=None,
    seed: int = 0,
) -> RfdModel:
    """New reference model warm-started from a trained plain backbone.

    Analysis/synthesis/hyper weights are copied; the first two analysis
    stages are frozen; reference-path modules are fresh, seeded
    deterministically.
    """
    config, extra, state = bb.load_checkpoint(backbone_path)
    base_cfg = RfdConfig.from_json_dict(config)
    cfg = RfdConfig(
        channel_width=base_cfg.channel_width,
        bottleneck=base_cfg.bottleneck,
        hyper_width=base_cfg.hyper_width,
        gmm_components=base_cfg.gmm_components,
        scales=tuple(scales),
        usnb=usnb,
        rfvm=rfvm,
        w_groups=base_cfg.w_groups,
        w_bits=base_cfg.w_bits,
        usnb_hidden=base_cfg.usnb_hidden,
    )
    torch.manual_seed(seed)
    model = RfdModel(cfg)
    own = model.state_dict()
    for name, arr in state.items():
        if name in own and tuple(own[name].shape) == arr.shape:
            own[name] = torch.from_numpy(arr)
    model.load_state_dict(own)
    model.backbone_fingerprint = bb.file_fingerprint(backbone_path)
    if dictionary is not None:
        model.check_dictionary(dictionary)
        model.set_dictionary_priors(dictionary.corpus_T, dictionary.corpus_A)
    model.freeze_front()
    return model
