import socket
from pathlib import Path

import pytest

from mobilehost import generate_keypair
from mobilehost.host import Host, HostConfig
from mobilehost.notes import NotesHandler, notes_descriptor
from mobilehost.transport import BindingConfig

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fig13_bytes() -> bytes:
    return (DATA_DIR / "fig13_request.xml").read_bytes()


@pytest.fixture(scope="session")
def fig14_bytes() -> bytes:
    return (DATA_DIR / "fig14_response.xml").read_bytes()


@pytest.fixture(scope="session")
def keypair():
    # RSA generation is the slow part of the suite; share one pair
    return generate_keypair(2048)


@pytest.fixture(scope="session")
def other_keypair():
    return generate_keypair(2048)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def port() -> int:
    return free_port()


def make_host(tmp_path, *bindings, secure_demo=False, with_demo=True, **cfg_kwargs) -> Host:
    if not bindings:
        bindings = (BindingConfig(kind="loopback"),)
    cfg = HostConfig(bindings=tuple(bindings), dataDir=tmp_path / "data", **cfg_kwargs)
    host = Host(cfg)
    if with_demo:
        host.create_service(notes_descriptor(secure_demo), NotesHandler())
    return host


@pytest.fixture
def demo_host(tmp_path):
    host = make_host(tmp_path)
    host.start()
    yield host
    host.shutdown()
