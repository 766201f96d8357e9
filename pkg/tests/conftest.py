import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skd.model import BackboneConfig, init_params
from skd.tensor import Tensor, conv2d

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def activation_pattern(params, x) -> bytes:
    """ReLU on/off masks and 2x2 max-pool winners for every unit, packed into bytes."""
    cfg = params.config
    h = (np.asarray(x, dtype=np.float64) - cfg.input_mean) / cfg.input_std
    parts = []
    n_blocks = len(cfg.block_filters)
    for i in range(1, n_blocks + 1):
        z = conv2d(Tensor(h), params.phi[f"block{i}.weight"], params.phi[f"block{i}.bias"], padding=1).data
        parts.append(np.packbits(z > 0).tobytes())
        h = np.maximum(z, 0)
        if i < n_blocks:
            n, c, hh, ww = h.shape
            win = h.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, -1, 4)
            parts.append(np.argmax(win, -1).astype(np.uint8).tobytes())
            h = win.max(-1).reshape(n, c, hh // 2, ww // 2)
    return b"".join(parts)


def stencil_is_smooth(params, x, eps: float) -> bool:
    """True when no +-eps move of any single parameter flips a ReLU or changes a pool winner.

    Central differences are then taken entirely inside one smooth piece of the
    network, so they measure the same derivative backprop reports.
    """
    base = activation_pattern(params, x)
    for t in params.named().values():
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            for step in (eps, -eps):
                flat[j] = old + step
                changed = activation_pattern(params, x) != base
                flat[j] = old
                if changed:
                    return False
    return True


def kink_free_problem(config: BackboneConfig, batch: int, eps: float = 1e-3, max_tries: int = 200,
                      view=lambda x: x):
    """First seed whose 64-bit params and inputs give a smooth finite-difference stencil.

    ``view`` maps the raw batch to what the network actually sees (e.g. the
    four-rotation batch).
    """
    for seed in range(max_tries):
        rng = np.random.default_rng(10_000 + seed)
        params = init_params(config, seed, dtype=np.float64)
        for t in params.named().values():
            t.data = t.data + rng.normal(0.0, 0.05, t.shape)
        x = rng.random((batch, config.input_channels, config.input_size, config.input_size))
        if stencil_is_smooth(params, view(x), eps):
            return params, x, rng
    raise RuntimeError("no kink-free configuration found")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return BackboneConfig(block_filters=(4, 8), input_channels=1, input_size=8, num_classes=6)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}"
    ACCEPTANCE_LINES.append(line + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
