import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from privopt import paillier as ph  # noqa: E402
from privopt import problem as pb  # noqa: E402


@pytest.fixture(scope="session")
def inst():
    return pb.paper_instance()


@pytest.fixture(scope="session")
def toy_keys():
    return ph.keypair_from_primes(5, 7)


@pytest.fixture(scope="session")
def keys_256():
    return ph.keygen(256, random.Random("tests/256"))


@pytest.fixture(scope="session")
def keys_1024():
    return ph.keygen(1024, random.Random("tests/1024"))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                rows.append((props["criterion"], outcome.upper(), props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, outcome, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num}: {'PASS' if outcome == 'PASSED' else 'FAIL'}  {detail}")
