"""Shared builders for small models, dictionaries, and images."""

import numpy as np
import torch

from rfdcodec.dictionary import FeatureDictionary
from rfdcodec.rfd import RfdConfig, RfdModel

TEST_FP = "00" * 32


def tiny_config(scales=(2, 3, 4), usnb=True, rfvm=True, width=8, bottleneck=4):
    return RfdConfig(
        channel_width=width,
        bottleneck=bottleneck,
        hyper_width=4,
        gmm_components=2,
        scales=scales,
        usnb=usnb,
        rfvm=rfvm,
        usnb_hidden=6,
    )


def tiny_model(scales=(2, 3, 4), usnb=True, rfvm=True, seed=0, width=8, bottleneck=4):
    torch.manual_seed(seed)
    model = RfdModel(tiny_config(scales, usnb, rfvm, width, bottleneck))
    model.backbone_fingerprint = TEST_FP
    model.eval()
    return model


def toy_dictionary(model, k=4, patch=64, seed=0, fingerprint=TEST_FP):
    rng = np.random.default_rng(seed)
    c = model.cfg.channel_width
    entries = {
        s: rng.normal(0.2, 0.5, size=(k, c, patch // 2 ** s, patch // 2 ** s)).astype(
            np.float32
        )
        for s in model.cfg.scales
    }
    if not entries:
        entries = {}
    return FeatureDictionary(
        entries=entries,
        k=k,
        backbone_fingerprint=fingerprint,
        patch_size=patch,
        corpus_T=np.array([0.55, 0.65, 0.7]),
        corpus_A=np.array([0.35, 0.55, 0.65]),
    )


def toy_image(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.6, size=(-(-h // 8), -(-w // 8), 3))
    img = np.kron(base, np.ones((8, 8, 1)))
    return np.clip(img[:h, :w], 0.0, 1.0)
