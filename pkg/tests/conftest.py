import numpy as np
import pytest

from attrembed.backbone import BackboneConfig
from attrembed.model import AttributeEmbeddingModel, ModelConfig


@pytest.fixture
def head_model_factory():
    """Models over precomputed feature maps (no backbone), float64."""

    def build(
        channels=8,
        attn_channels=4,
        reduction=2,
        embed_dim=8,
        n_attributes=3,
        spatial=4,
        variant="full",
        seed=0,
    ):
        config = ModelConfig(
            channels=channels,
            n_attributes=n_attributes,
            attn_channels=attn_channels,
            reduction=reduction,
            embed_dim=embed_dim,
            variant=variant,
        )
        backbone = BackboneConfig(
            kind="precomputed", out_channels=channels, out_spatial=spatial
        )
        return AttributeEmbeddingModel(config, backbone, seed=seed, dtype=np.float64)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(0)
