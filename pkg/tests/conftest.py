import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tone_corpus(tmp_path_factory):
    from emohrnet import synthetic

    root = tmp_path_factory.mktemp("tones")
    return synthetic.write_corpus(root)


def write_config(directory, manifest, epochs=3, **sections):
    """Tone-fixture engine config written as JSON; returns its path."""
    import json

    from emohrnet import synthetic

    raw = synthetic.fixture_config(str(manifest), epochs=epochs)
    for name, values in sections.items():
        raw[name].update(values)
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(raw, indent=2))
    return path


def pytest_addoption(parser):
    parser.addoption(
        "--ravdess-dir",
        default=os.environ.get("EMOHRNET_RAVDESS_DIR", ""),
        help="RAVDESS subset for the optional data-dependent acceptance check",
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
