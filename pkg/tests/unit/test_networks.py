"""Tests for the denoiser, revision module, segmenter and checkpoints."""

from pathlib import Path

import numpy as np
import pytest
import torch

from src.config import ExperimentConfig
from src.networks.denoiser import Denoiser
from src.networks.layers import SinusoidalEmbedding, norm_groups
from src.networks.params import (
    ModelParams,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from src.networks.revision import Revision
from src.networks.segmenter import Segmenter
from src.services.errors import ConfigError, DataFormatError, GeometryError
from src.services.pipeline import load_model


@pytest.fixture
def cube() -> torch.Tensor:
    return torch.rand((2, 1, 8, 8, 8), generator=torch.Generator().manual_seed(0))


class TestLayers:
    """Tests for shared building blocks."""

    @pytest.mark.parametrize(("channels", "groups"), [(1, 1), (4, 2), (6, 3), (8, 4), (16, 8), (64, 8)])
    def test_norm_groups(self, channels: int, groups: int):
        """Test the group count for common widths."""
        assert norm_groups(channels) == groups

    def test_time_embedding(self):
        """Test embeddings are distinct per timestep and bounded."""
        emb = SinusoidalEmbedding(8)(torch.tensor([1, 2, 250]))
        assert emb.shape == (3, 8)
        assert emb.abs().max() <= 1.0
        assert not torch.allclose(emb[0], emb[1])


class TestDenoiser:
    """Tests for Denoiser."""

    def test_output_shape(self, tiny_config: ExperimentConfig, cube: torch.Tensor):
        """Test eps_hat has the shape of x_t."""
        torch.manual_seed(0)
        model = Denoiser(tiny_config.network)
        assert model(cube, cube, torch.tensor([1, 4])).shape == cube.shape

    def test_scalar_timestep(self, tiny_config: ExperimentConfig, cube: torch.Tensor):
        """Test a 0-d timestep is broadcast over the batch."""
        torch.manual_seed(0)
        model = Denoiser(tiny_config.network).eval()
        torch.testing.assert_close(model(cube, cube, torch.tensor(3)), model(cube, cube, torch.tensor([3, 3])))

    def test_output_depends_on_timestep(self, tiny_config: ExperimentConfig, cube: torch.Tensor):
        """Test the untrained denoiser already responds to the timestep."""
        torch.manual_seed(0)
        model = Denoiser(tiny_config.network).eval()
        with torch.no_grad():
            first = model(cube, cube, torch.tensor(1))
            last = model(cube, cube, torch.tensor(tiny_config.diffusion.T))
        assert not torch.allclose(first, last)

    def test_indivisible_patch(self, tiny_config: ExperimentConfig):
        """Test odd patch edges are rejected."""
        model = Denoiser(tiny_config.network)
        x = torch.zeros(1, 1, 7, 8, 8)
        with pytest.raises(ConfigError):
            model(x, x, torch.tensor([1]))

    def test_gradcheck(self, tiny_config: ExperimentConfig):
        """Test input gradients against finite differences."""
        torch.manual_seed(0)
        model = Denoiser(tiny_config.network).double()
        x = torch.rand((1, 1, 4, 4, 4), dtype=torch.float64, requires_grad=True)
        condition = torch.rand((1, 1, 4, 4, 4), dtype=torch.float64)
        t = torch.tensor([2])
        assert torch.autograd.gradcheck(lambda v: model(v, condition, t), (x,), atol=1e-5)


class TestRevision:
    """Tests for Revision."""

    def test_identity_at_init(self, cube: torch.Tensor):
        """Test an untrained module returns the low-count input."""
        model = Revision(4)
        i_lc = cube * 30.0
        torch.testing.assert_close(model(cube * 2 - 1, i_lc), i_lc)

    def test_product_channel(self):
        """Test with the factor channels muted the correction sees only unmap(p_hc) * i_lc."""
        torch.manual_seed(0)
        model = Revision(4).double()
        with torch.no_grad():
            model.conv1.weight[:, 1:].zero_()
            model.conv3.weight.normal_(0, 0.1)
        norm = model.norm_map
        shape = (1, 1, 4, 4, 4)

        def correction(suv: float, i_lc: float) -> torch.Tensor:
            p_hc = norm.to_diffusion(torch.full(shape, suv, dtype=torch.float64))
            lc = torch.full(shape, i_lc, dtype=torch.float64)
            return model(p_hc, lc) - lc

        torch.testing.assert_close(correction(2.0, 3.0), correction(3.0, 2.0), atol=1e-9, rtol=0)
        assert not torch.allclose(correction(2.0, 3.0), correction(2.0, 4.0))

    def test_shape_mismatch(self):
        """Test inputs must share a shape."""
        with pytest.raises(GeometryError):
            Revision(4)(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 2))

    def test_gradcheck(self):
        """Test gradients with respect to both inputs."""
        torch.manual_seed(0)
        model = Revision(4).double()
        with torch.no_grad():
            model.conv3.weight.normal_(0, 0.1)
        p_hc = (torch.rand((1, 1, 4, 4, 4), dtype=torch.float64) * 1.8 - 0.9).requires_grad_()
        i_lc = (torch.rand((1, 1, 4, 4, 4), dtype=torch.float64) * 10).requires_grad_()
        assert torch.autograd.gradcheck(model, (p_hc, i_lc), atol=1e-5)


class TestSegmenter:
    """Tests for Segmenter."""

    def test_head_shapes(self, tiny_config: ExperimentConfig, cube: torch.Tensor):
        """Test two lesion channels and S organ channels."""
        torch.manual_seed(0)
        model = Segmenter(tiny_config.network, tiny_config.roster.num_classes)
        lesion, organ = model(cube, cube)
        assert lesion.shape == (2, 2, 8, 8, 8)
        assert organ.shape == (2, tiny_config.roster.num_classes - 1, 8, 8, 8)

    @pytest.mark.parametrize(("perturbed", "untouched"), [("lesion_decoder", 1), ("organ_decoder", 0)])
    def test_heads_have_separate_decoders(
        self, tiny_config: ExperimentConfig, cube: torch.Tensor, perturbed: str, untouched: int
    ):
        """Test changing one decoder leaves the other head's output unchanged."""
        torch.manual_seed(0)
        model = Segmenter(tiny_config.network, tiny_config.roster.num_classes).eval()
        with torch.no_grad():
            before = model(cube, cube)
            for param in getattr(model, perturbed).parameters():
                param.add_(0.5)
            after = model(cube, cube)
        torch.testing.assert_close(after[untouched], before[untouched], atol=0, rtol=0)
        assert not torch.allclose(after[1 - untouched], before[1 - untouched])

    def test_indivisible_patch(self, tiny_config: ExperimentConfig):
        """Test patches must survive every encoder stage."""
        model = Segmenter(tiny_config.network, 4)
        x = torch.zeros(1, 1, 6, 8, 8)
        with pytest.raises(ConfigError):
            model(x, x)

    def test_gradcheck(self, tiny_config: ExperimentConfig):
        """Test input gradients of both heads."""
        torch.manual_seed(0)
        model = Segmenter(tiny_config.network, 4).double()
        p_hcr = (torch.rand((1, 1, 4, 4, 4), dtype=torch.float64) * 10).requires_grad_()
        i_lc = (torch.rand((1, 1, 4, 4, 4), dtype=torch.float64) * 10).requires_grad_()
        assert torch.autograd.gradcheck(lambda a, b: model(a, b), (p_hcr, i_lc), atol=1e-5)


class TestParams:
    """Tests for initialization and checkpoints."""

    def test_init_deterministic(self, tiny_config: ExperimentConfig):
        """Test the same seed gives the same weights."""
        a = ModelParams.from_model(init_params(tiny_config, 3))
        b = ModelParams.from_model(init_params(tiny_config, 3))
        c = ModelParams.from_model(init_params(tiny_config, 4))
        assert a.same_as(b)
        assert not a.same_as(c)
        assert a.all_finite()

    def test_init_leaves_global_rng(self, tiny_config: ExperimentConfig):
        """Test initialization does not advance the global torch generator."""
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        init_params(tiny_config, 3)
        torch.testing.assert_close(torch.rand(3), expected)

    def test_groups(self, tiny_config: ExperimentConfig):
        """Test parameter names are grouped per network."""
        params = ModelParams.from_model(init_params(tiny_config, 0))
        groups = {name.split("/")[0] for name in params}
        assert groups == {"denoiser", "revision", "segmenter"}
        assert len(params.group("revision")) > 0

    def test_checkpoint_round_trip(self, temp_dir: Path, tiny_config: ExperimentConfig):
        """Test saved weights and metadata load back unchanged."""
        model = init_params(tiny_config, 1)
        save_checkpoint(temp_dir / "m.pckpt", model, tiny_config, meta={"epoch": 2})
        checkpoint = load_checkpoint(temp_dir / "m.pckpt")
        assert checkpoint.config == tiny_config
        assert checkpoint.meta == {"epoch": 2}
        assert checkpoint.params().same_as(ModelParams.from_model(model))
        assert ModelParams.from_model(checkpoint.build_model()).same_as(ModelParams.from_model(model))

    def test_checkpoint_bytes_deterministic(self, tiny_config: ExperimentConfig):
        """Test equal inputs encode to equal bytes."""
        arrays = {"x": np.arange(4, dtype=np.float32), "n": np.array([3], dtype=np.int64)}
        assert encode_checkpoint(tiny_config, arrays) == encode_checkpoint(tiny_config, dict(arrays))

    def test_bad_magic(self, tiny_config: ExperimentConfig):
        """Test foreign bytes are rejected."""
        with pytest.raises(DataFormatError):
            decode_checkpoint(b"NOTCKPT\n{}\n\x00")

    def test_incompatible_config(self, temp_dir: Path, tiny_config: ExperimentConfig):
        """Test a checkpoint refuses a config with another network."""
        save_checkpoint(temp_dir / "m.pckpt", init_params(tiny_config, 1), tiny_config)
        other = tiny_config.model_copy(
            update={"network": tiny_config.network.model_copy(update={"base_channels": 8})}
        )
        with pytest.raises(ConfigError):
            load_model(temp_dir / "m.pckpt", other)
        model, config = load_model(temp_dir / "m.pckpt")
        assert config == tiny_config
        assert not model.training
