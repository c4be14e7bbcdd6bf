import json
import zlib

import numpy as np
import pytest

from predfilter.synth import ScenarioConfig, generate_image, generate_scenario

SEED42 = dict(
    seed=42,
    num_images=64,
    num_classes=6,
    image_size=(64, 64),
    confusion_pairs=[(1, 2, 0.6), (3, 4, 0.6)],
    classifier_quality=0.98,
)

_ACCEPTANCE = []


def seed42_config(**overrides) -> ScenarioConfig:
    return ScenarioConfig(**{**SEED42, **overrides})


@pytest.fixture(scope="session")
def seed42_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seed42")
    generate_scenario(seed42_config(), out)
    return out


@pytest.fixture(scope="session")
def seed42_images():
    cfg = seed42_config()
    return [generate_image(cfg, i) for i in range(cfg.num_images)]


@pytest.fixture
def rng(request):
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


def random_instance(rng, k=4, h=8, w=8, ignore_frac=0.1):
    logits = rng.normal(size=(k, h, w)).astype(np.float32)
    gt = rng.integers(0, k, size=(h, w)).astype(np.uint8)
    gt[rng.random((h, w)) < ignore_frac] = 255
    return logits, gt


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(name, ok, detail=""):
        _ACCEPTANCE.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
