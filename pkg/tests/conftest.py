import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mpx import profiler


@pytest.fixture(autouse=True)
def no_installed_profiler():
    """Tests that install a process-wide profiler must not leak it."""
    yield
    profiler.install(None)


@pytest.fixture
def free_port():
    def _get() -> int:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.bind(("127.0.0.1", 0))
            return s.getsockname()[1]

    return _get
