import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    _CRITERIA.append((name, passed, detail))
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def block_params(block):
    """Numpy copies of a PAWE/CAWE block's parameters, keyed for the loop oracles."""
    conv = block.main_conv if hasattr(block, "main_conv") else block.skip_conv
    attn = block.pab if hasattr(block, "pab") else block.cab
    p = {
        "conv_w": conv.weight.detach().double().numpy(),
        "fc1_w": block.web.fc1.weight.detach().double().numpy(),
        "fc1_b": block.web.fc1.bias.detach().double().numpy(),
        "fc2_w": block.web.fc2.weight.detach().double().numpy(),
        "fc2_b": block.web.fc2.bias.detach().double().numpy(),
        "alpha": attn.alpha.item(),
    }
    if hasattr(block, "pab"):
        for name in ("proj_a", "proj_b", "proj_c"):
            layer = getattr(attn, name)
            p[f"{name}_w"] = layer.weight.detach().double().numpy()[:, :, 0, 0]
            p[f"{name}_b"] = layer.bias.detach().double().numpy()
    return p


def randomize_block(block, seed, alpha=0.7, web_scale=3.0):
    """Give every parameter a non-trivial value so each branch is exercised."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in block.named_parameters():
            param.copy_(torch.randn(param.shape, generator=g, dtype=param.dtype) * 0.5)
        attn = block.pab if hasattr(block, "pab") else block.cab
        attn.alpha.fill_(alpha)
        for layer in (block.web.fc1, block.web.fc2):
            layer.weight.mul_(web_scale)
            layer.bias.abs_()
    return block


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
