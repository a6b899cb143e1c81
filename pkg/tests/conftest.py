import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import ACCEPTANCE  # noqa: E402
from sevgrade.dataset import SyntheticSpec, generate_synthetic_corpus  # noqa: E402
from sevgrade.encoder import EncoderConfig  # noqa: E402
from sevgrade.pipeline import configure_determinism  # noqa: E402

def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")


@pytest.fixture(scope="session", autouse=True)
def _determinism():
    configure_determinism()
    logging.getLogger("sevgrade").setLevel(logging.INFO)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Four images per grade at 32 px; cheap enough for unit tests."""
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(SyntheticSpec(n_per_grade=4, image_side=32, rng_seed=3), out)
    return manifest


@pytest.fixture
def tiny32():
    return EncoderConfig(backbone_id="tiny", truncate_at_layer=3, patch_mode=True, window=3,
                         input_side=32, pretrained=False)
