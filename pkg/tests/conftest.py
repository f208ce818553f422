import socket
from pathlib import Path

import pytest

from coral.bus import BrokerThread, connect

REPO = Path(__file__).resolve().parents[1]
DEMOS = REPO / "demos"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def broker():
    b = BrokerThread("127.0.0.1:0")
    b.start()
    yield b
    b.stop()


@pytest.fixture
def client_factory(broker):
    clients = []

    def make(client_id=None):
        c = connect(broker.address, client_id)
        clients.append(c)
        return c

    yield make
    for c in clients:
        c.close()


STUB = Path(__file__).resolve().parent / "stubs" / "stub_component.py"


def instance_processes(run_id: str) -> list:
    """Live processes carrying this instance's run id in their environment."""
    import psutil

    found = []
    for proc in psutil.process_iter(["pid", "status"]):
        try:
            if proc.info["status"] == psutil.STATUS_ZOMBIE:
                continue
            if proc.environ().get("CORAL_RUN_ID") == run_id:
                found.append(proc)
        except psutil.Error:
            continue
    return found


def write_compose(directory: Path, services: dict, top: dict | None = None, name="compose.yaml") -> Path:
    import yaml

    doc = {"x-coral": {"instance_id": directory.name.replace("_", "-")[:40] or "t",
                       "bus": "127.0.0.1:0", "readiness_deadline": 10, **(top or {})},
           "services": services}
    path = directory / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


BUILTIN_TREE = """<root BTCPP_format="4"><BehaviorTree ID="T">
  <Sequence><Sleep msec="{msec}"/><AlwaysSuccess/></Sequence>
</BehaviorTree></root>"""


def demo_copy(tmp_path: Path, which="demo_a", lines=50, seed=0) -> Path:
    """Copy a demo directory somewhere writable, with a freshly generated bag."""
    import shutil

    from coral.demokit.bag import generate_bag

    dest = tmp_path / which
    shutil.copytree(DEMOS / which, dest)
    if which == "demo_a":
        generate_bag(dest / "data" / "demo_a_bag.jsonl", lines=lines, seed=seed)
    return dest


def coral_cli(*args, cwd=None, env=None, timeout=120, ephemeral=True):
    """Run the installed CLI in a subprocess, by default on an ephemeral bus port."""
    import os
    import subprocess
    import sys

    full_env = {**os.environ, **(env or {})}
    if ephemeral:
        full_env["CORAL_BUS_ADDR"] = "127.0.0.1:0"
    else:
        full_env.pop("CORAL_BUS_ADDR", None)
    return subprocess.run([sys.executable, "-m", "coral.cli", *map(str, args)], cwd=cwd, env=full_env,
                          capture_output=True, text=True, timeout=timeout)
