import os
import sys
from pathlib import Path

import pytest

BRIDGE_ROOT = Path(__file__).resolve().parents[1]
PRIMARY_SRC = BRIDGE_ROOT.parent / "src"


def primary_env():
    """Environment for invoking the consumer CLI as a subprocess."""
    env = dict(os.environ)
    env["PYTHONPATH"] = str(PRIMARY_SRC) + os.pathsep + env.get("PYTHONPATH", "")
    return env


def primary_cli(*args):
    return [sys.executable, "-m", "backloc.cli", *args]


@pytest.fixture(scope="session")
def photo_dir(tmp_path_factory):
    from shardbridge.testimages import write_photos

    out = tmp_path_factory.mktemp("photos")
    write_photos(out, 5, seed=3, size=256)
    return out
