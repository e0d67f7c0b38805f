import pytest
import torch

from mvb.unet import MvbUNet


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def tiny_model(variant="mvb", masked=False, widths=(8, 16), size=8, **kw):
    kw.setdefault("c_cond", 8)
    return MvbUNet(widths=widths, variant=variant, in_channels=9 if masked else 4, size=size, **kw)


def randomize(model, scale=0.1, seed=1):
    """Push every parameter off its initial value so zero-initialized paths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


PROMPT = [1, 4, 7, 15, 0, 0, 0, 0]

# short schedule for tests: betas rescaled by 1000/50 so alpha_bar ends near zero like the T=1000 default
SHORT = dict(num_timesteps=50, beta_start=2e-3, beta_end=0.4)
