import numpy as np
import pytest
import torch

from rfdcodec.backbone import (
    AnalysisTransform,
    BackboneConfig,
    ChannelGaussian,
    HyperAnalysis,
    HyperSynthesis,
    SynthesisTransform,
    file_fingerprint,
    load_checkpoint,
    save_checkpoint,
    state_hash,
)
from rfdcodec.entropy import GmmParams, gmm_likelihood
from rfdcodec.errors import CheckpointFormatError


def tiny_cfg():
    return BackboneConfig(channel_width=8, bottleneck=4, hyper_width=4, gmm_components=2)


class TestTransforms:
    def test_latent_is_sixteenth_resolution(self):
        torch.manual_seed(0)
        cfg = tiny_cfg()
        analysis = AnalysisTransform(cfg)
        x = torch.rand(1, 3, 128, 128)
        z = analysis.project(analysis.features_at_scale(x, 4))
        assert z.shape == (1, 4, 8, 8)

    def test_synthesis_mirrors_analysis_shape(self):
        torch.manual_seed(1)
        cfg = tiny_cfg()
        analysis = AnalysisTransform(cfg)
        synthesis = SynthesisTransform(cfg)
        for hw in ((64, 64), (32, 96)):
            x = torch.rand(1, 3, *hw)
            z = analysis.project(analysis.features_at_scale(x, 4))
            r = synthesis.unproject(z)
            r = synthesis.up32(synthesis.up43(r))
            out = synthesis.up10(synthesis.up21(r))
            assert out.shape == x.shape

    def test_hyper_round_trip_shapes_including_odd(self):
        torch.manual_seed(2)
        cfg = tiny_cfg()
        ha, hs = HyperAnalysis(cfg), HyperSynthesis(cfg)
        for hw in ((8, 8), (7, 9), (1, 1)):
            z = torch.rand(1, 4, *hw)
            hz = ha(z)
            weights, means, scales = hs(hz, hw)
            assert weights.shape == (2, 1, 4, *hw)
            assert torch.allclose(weights.sum(dim=0), torch.ones(1, 4, *hw), atol=1e-6)
            assert (scales >= 1e-2).all()


class TestChannelGaussian:
    def test_likelihood_matches_numpy_reference(self):
        torch.manual_seed(3)
        side = ChannelGaussian(3, init_mean=1.0, init_sigma=2.0)
        vals = torch.tensor([[[[0.0]], [[2.0]], [[-1.0]]]])
        got = side.likelihood(vals)[0]
        for c in range(3):
            params = GmmParams(
                weights=[[1.0]],
                means=[[float(side.mean.detach()[c])]],
                scales=[[float(side.sigma().detach()[c])]],
            )
            want = gmm_likelihood(np.array([float(vals[0, c, 0, 0])]), params)[0]
            assert abs(float(got[c, 0, 0]) - want) < 1e-6

    def test_export_params_shapes(self):
        side = ChannelGaussian(5)
        params = side.export_params()
        assert len(params) == 5
        for p in params:
            p.validate()


class TestCheckpointIO:
    def _roundtrip(self, tmp_path):
        state = {
            "a.weight": torch.arange(12, dtype=torch.float32).reshape(3, 4),
            "b.bias": torch.tensor([1.5, -2.5]),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"width": 8}, {"note": "x"}, state)
        return path, state

    def test_round_trip(self, tmp_path):
        path, state = self._roundtrip(tmp_path)
        config, extra, loaded = load_checkpoint(path)
        assert config == {"width": 8}
        assert extra == {"note": "x"}
        for k in state:
            np.testing.assert_array_equal(loaded[k], state[k].numpy())

    def test_fingerprint_deterministic(self, tmp_path):
        p1, _ = self._roundtrip(tmp_path)
        state = {
            "a.weight": torch.arange(12, dtype=torch.float32).reshape(3, 4),
            "b.bias": torch.tensor([1.5, -2.5]),
        }
        p2 = tmp_path / "model2.ckpt"
        save_checkpoint(p2, {"width": 8}, {"note": "x"}, state)
        assert file_fingerprint(p1) == file_fingerprint(p2)

    def test_bad_magic_rejected(self, tmp_path):
        path, _ = self._roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path, _ = self._roundtrip(tmp_path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


def test_state_hash_sensitive_to_values():
    a = {"w": torch.zeros(3)}
    b = {"w": torch.ones(3)}
    assert state_hash(a) != state_hash(b)
    assert state_hash(a) == state_hash({"w": torch.zeros(3)})
