"""Instance lifecycle: broker, components, readiness, restarts, teardown.

Every child runs in its own process group so that stopping a component
also reaches anything it spawned.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from coral.bus import BusClient, BusError, CallTimeout, ServiceError, connect
from coral.composer.config import MAX_RESTARTS, ComponentSpec, InstanceConfig
from coral.coordination import SharedStore
from coral.errors import ConfigError, ReadinessError, RuntimeFailure
from coral.registry import manifest_channel

log = logging.getLogger(__name__)

DEFAULT_GRACE = 5.0
RESTART_DELAY = 0.2
BROKER_START_TIMEOUT = 10.0


def params_channel(name: str) -> str:
    return f"coral/params/get/{name}"


@dataclass
class ComponentProc:
    spec: ComponentSpec
    log_path: Path
    proc: subprocess.Popen | None = None
    state: str = "pending"  # pending running restarting exited failed stopped
    restarts: int = 0
    exit_code: int | None = None
    history: list = field(default_factory=list)  # exit codes, oldest first
    cause: str | None = None
    stop_requested: bool = False

    @property
    def pid(self):
        return self.proc.pid if self.proc else None

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None


class Relay:
    """Bidirectional forwarding of one channel prefix between two brokers.

    Forwarded messages carry ``relayed_from`` and are never forwarded again,
    so configure the relay on one side of a pair only.
    """

    def __init__(self, local: BusClient, peer_addr: str, prefix: str, origin: str):
        self.local = local
        self.peer_addr = peer_addr
        self.prefix = prefix
        self.origin = origin
        self.peer: BusClient | None = None
        self.forwarded = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._keep_connected, daemon=True, name="coral-relay")

    def start(self) -> None:
        self.local.subscribe(self.prefix, callback=self._to_peer, prefix=True)
        self._thread.start()

    def _mark(self, data):
        return {**data, "relayed_from": self.origin}

    def _to_peer(self, env):
        peer = self.peer
        if not isinstance(env.data, dict) or "relayed_from" in env.data:
            return
        if peer is not None and peer.connected:
            try:
                peer.publish(env.ch, self._mark(env.data))
                self.forwarded += 1
            except BusError:
                pass

    def _to_local(self, env):
        if not isinstance(env.data, dict) or "relayed_from" in env.data:
            return
        try:
            self.local.publish(env.ch, self._mark(env.data))
            self.forwarded += 1
        except BusError:
            pass

    def _keep_connected(self):
        while not self._stop.is_set():
            if self.peer is None or not self.peer.connected:
                try:
                    peer = connect(self.peer_addr, f"relay-{self.origin}")
                    peer.subscribe(self.prefix, callback=self._to_local, prefix=True)
                    self.peer = peer
                    log.info("relay %s* connected to %s", self.prefix, self.peer_addr)
                except BusError:
                    pass
            self._stop.wait(0.25)

    @property
    def connected(self) -> bool:
        return self.peer is not None and self.peer.connected

    def stop(self) -> None:
        self._stop.set()
        if self.peer is not None:
            self.peer.close()


class Instance:
    """Handle for one running instance. ``up``/``down`` are serialized."""

    def __init__(self, cfg: InstanceConfig, params: dict | None = None, state_dir=None,
                 grace: float = DEFAULT_GRACE, echo=None, bus: str | None = None):
        self.cfg = cfg
        self.params = params or {}
        self.grace = grace
        self.echo = echo
        self.requested_bus = bus or os.environ.get("CORAL_BUS_ADDR") or cfg.bus
        self.bus_addr: str | None = None
        self.run_id = uuid.uuid4().hex
        self.state_dir = Path(state_dir or Path.cwd() / ".coral")
        self.log_dir = self.state_dir / cfg.instance_id / "logs"
        self.procs = {c.name: ComponentProc(c, self.log_dir / f"{c.name}.log") for c in cfg.components}
        self.broker: subprocess.Popen | None = None
        self.session: BusClient | None = None
        self.store = SharedStore()
        self.relay: Relay | None = None
        self.state = "new"
        self.exit_code: int | None = None
        self.message = ""
        self.report: dict | None = None
        self._mutate = threading.Lock()
        self._finished = threading.Event()
        self._monitors = []
        self._pumps = []
        self._ready = set()

    # -- helpers -----------------------------------------------------------------

    def _emit(self, name: str, line: str) -> None:
        if self.echo is not None:
            try:
                self.echo(f"{name} | {line}")
            except Exception:
                pass

    def _pump(self, name: str, stream, path: Path) -> threading.Thread:
        def run():
            with open(path, "a", buffering=1) as fh:
                for raw in iter(stream.readline, b""):
                    line = raw.decode("utf-8", "replace").rstrip("\n")
                    fh.write(line + "\n")
                    self._emit(name, line)
            stream.close()
        t = threading.Thread(target=run, daemon=True, name=f"coral-log-{name}")
        t.start()
        self._pumps.append(t)
        return t

    def _child_env(self, extra: dict) -> dict:
        env = dict(os.environ)
        env.update(PYTHONUNBUFFERED="1", CORAL_INSTANCE_ID=self.cfg.instance_id,
                   CORAL_RUN_ID=self.run_id)
        env.update(extra)
        return env

    def component_env(self, spec: ComponentSpec) -> dict:
        env = {
            "CORAL_BUS_ADDR": self.bus_addr or self.requested_bus,
            "CORAL_COMPONENT_NAME": spec.name,
            "CORAL_PARAMS": json.dumps(self.params.get(spec.params_ns, {})),
        }
        if spec.role == "executor":
            env.update(
                CORAL_TREE_PATH=str(spec.tree),
                CORAL_EXPECTED_SKILLSETS=",".join(c.name for c in self.cfg.by_role("skillset")),
                CORAL_TICK_MS=str(spec.tick_ms),
                CORAL_READINESS_DEADLINE=str(self.cfg.readiness_deadline))
        env.update(spec.env)
        return env

    def argv(self, spec: ComponentSpec) -> list:
        argv = list(spec.command)
        if spec.image:
            runtime = shutil.which("docker") or shutil.which("podman")
            if runtime is None:
                raise ConfigError(f"{spec.name}: image {spec.image!r} needs docker or podman on PATH")
            envs = [x for k, v in self.component_env(spec).items() for x in ("-e", f"{k}={v}")]
            return [runtime, "run", "--rm", "--network", "host",
                    "--name", f"coral_{self.cfg.instance_id}_{spec.name}", *envs, spec.image, *argv]
        if not argv:
            argv = [sys.executable, "-m", "coral.executor"]
        if argv[0] in ("python", "python3"):
            argv[0] = sys.executable
        return argv

    # -- startup -----------------------------------------------------------------

    def _start_broker(self) -> None:
        out = self.log_dir / "broker.log"
        self.broker = subprocess.Popen(
            [sys.executable, "-m", "coral.bus", "--listen", self.requested_bus],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, start_new_session=True,
            env=self._child_env({}), cwd=self.cfg.base_dir)
        seen = []

        def read_banner():
            for raw in iter(self.broker.stdout.readline, b""):
                seen.append(raw.decode("utf-8", "replace").rstrip())
                if seen[-1].startswith("coral-broker listening on "):
                    return

        reader = threading.Thread(target=read_banner, daemon=True)
        reader.start()
        reader.join(BROKER_START_TIMEOUT)
        with open(out, "a") as fh:
            fh.writelines(line + "\n" for line in seen)
        if reader.is_alive() or not seen or not seen[-1].startswith("coral-broker listening on "):
            self._signal_group(self.broker, signal.SIGKILL)
            self.broker.wait()
            raise RuntimeFailure(f"bus broker did not start on {self.requested_bus}: "
                                 f"{seen[-1] if seen else 'no output'}")
        self.bus_addr = seen[-1].rsplit(" ", 1)[1]
        self._pump("broker", self.broker.stdout, out)

    def _spawn(self, cp: ComponentProc) -> None:
        spec = cp.spec
        argv = self.argv(spec)
        try:
            cp.proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                       stdin=subprocess.DEVNULL, start_new_session=True,
                                       env=self._child_env(self.component_env(spec)),
                                       cwd=self.cfg.base_dir)
        except OSError as exc:
            raise RuntimeFailure(f"{spec.name}: cannot start {argv[0]!r}: {exc.strerror}") from None
        cp.state = "running"
        log.info("started %s (pid %d)", spec.name, cp.proc.pid)
        self._pump(spec.name, cp.proc.stdout, cp.log_path)
        t = threading.Thread(target=self._monitor, args=(cp, cp.proc), daemon=True,
                             name=f"coral-monitor-{spec.name}")
        t.start()
        self._monitors.append(t)

    def _monitor(self, cp: ComponentProc, proc: subprocess.Popen) -> None:
        code = proc.wait()
        cp.exit_code = code
        cp.history.append(code)
        if cp.stop_requested or self.state in ("stopping", "down"):
            return
        name, role = cp.spec.name, cp.spec.role
        if code != 0 and cp.spec.restart == "on-failure" and cp.restarts < MAX_RESTARTS:
            cp.restarts += 1
            cp.state = "restarting"
            log.warning("%s exited with %d; restart %d of %d", name, code, cp.restarts, MAX_RESTARTS)
            self._emit("coral", f"{name} exited with {code}; restarting ({cp.restarts}/{MAX_RESTARTS})")
            time.sleep(RESTART_DELAY)
            if self.state in ("stopping", "down") or cp.stop_requested:
                cp.state = "exited"
                return
            try:
                self._spawn(cp)
            except RuntimeFailure as exc:
                cp.state = "failed"
                self._finish(4, str(exc))
            return
        cp.state = "exited" if code == 0 else "failed"
        if role == "executor":
            if code == 3:
                self._finish(3, f"executor {name} could not get its skillsets ready")
            elif code == 2:
                self._finish(2, f"executor {name} rejected its tree or bindings")
            elif code != 0:
                self._finish(4, f"executor {name} exited with {code}")
            elif all(self.procs[e.name].state == "exited" for e in self.cfg.by_role("executor")):
                self._finish(0, "all executors finished")
        elif code != 0:
            extra = f" after {cp.restarts} restarts" if cp.restarts else ""
            self._finish(4, f"{role} {name} exited with {code}{extra}")

    def _finish(self, code: int, message: str) -> None:
        if self.exit_code is None:
            self.exit_code = code
            self.message = message
            log.info("instance %s finishing: %s (exit %d)", self.cfg.instance_id, message, code)
            self._emit("coral", f"{message} (exit {code})")
        self._finished.set()

    def _is_ready(self, name: str) -> bool:
        if name in self._ready:
            return True
        try:
            self.session.call(manifest_channel(name), {}, timeout=0.5)
        except (ServiceError, CallTimeout):
            return False
        self._ready.add(name)
        return True

    def _await_ready(self, names, deadline: float) -> None:
        """Block until each named skillset answers for its manifest."""
        pending = [n for n in names if self.procs[n].spec.role == "skillset"]
        while pending:
            for n in list(pending):
                cp = self.procs[n]
                if cp.state == "failed":
                    raise ReadinessError(f"skillset {n} exited (code {cp.exit_code}) before it was ready",
                                         [n])
                if self._is_ready(n):
                    pending.remove(n)
            if not pending:
                return
            if time.monotonic() >= deadline:
                raise ReadinessError(f"skillsets not ready within {self.cfg.readiness_deadline:g}s: "
                                     f"{', '.join(pending)}", pending)
            if self._finished.is_set() and self.exit_code not in (None, 0):
                raise ReadinessError(self.message, pending)
            time.sleep(0.1)

    def up(self) -> "Instance":
        with self._mutate:
            if self.state != "new":
                raise RuntimeError(f"instance is {self.state}")
            self.state = "starting"
            self.log_dir.mkdir(parents=True, exist_ok=True)
            try:
                self._start_broker()
                self.session = connect(self.bus_addr, f"coral-supervisor-{self.cfg.instance_id}",
                                       retry_for=5.0)
                self.store.serve(self.session)
                for c in self.cfg.components:
                    ns = dict(self.params.get(c.params_ns, {}))
                    self.session.serve(params_channel(c.name), lambda req, ns=ns: ns)
                if self.cfg.relay:
                    self.relay = Relay(self.session, self.cfg.relay["peer"], self.cfg.relay["prefix"],
                                       self.cfg.instance_id)
                    self.relay.start()
                deadline = time.monotonic() + self.cfg.readiness_deadline
                for spec in self.cfg.start_order():
                    self._await_ready(spec.depends_on, deadline)
                    self._spawn(self.procs[spec.name])
                self._await_ready([c.name for c in self.cfg.by_role("skillset")], deadline)
            except BaseException as exc:
                if isinstance(exc, ReadinessError):
                    self.exit_code, self.message = 3, str(exc)
                elif isinstance(exc, (ConfigError, RuntimeFailure)):
                    self.exit_code, self.message = exc.exit_code, str(exc)
                self.state = "running"
                self._down_locked()
                raise
            self.state = "running"
            if self.cfg.by_role("executor") == [] and not self.cfg.headless:
                self._finish(0, "nothing to run")
            return self

    # -- waiting and teardown --------------------------------------------------------

    def wait(self, timeout: float | None = None) -> int | None:
        """Exit code once every executor is done or something failed for good."""
        self._finished.wait(timeout)
        return self.exit_code

    @property
    def finished(self) -> bool:
        return self._finished.is_set()

    def status(self) -> dict:
        return {n: {"role": cp.spec.role, "state": cp.state, "pid": cp.pid, "restarts": cp.restarts,
                    "exit_code": cp.exit_code} for n, cp in self.procs.items()}

    def read_log(self, name: str) -> str:
        path = self.procs[name].log_path if name in self.procs else self.log_dir / f"{name}.log"
        return path.read_text() if path.exists() else ""

    @staticmethod
    def _signal_group(proc, sig) -> None:
        try:
            os.killpg(proc.pid, sig)
        except (ProcessLookupError, PermissionError):
            pass

    def _stop_group(self, procs: list, report: dict) -> None:
        for cp in procs:
            if cp.alive:
                cp.stop_requested = True
                self._signal_group(cp.proc, signal.SIGTERM)
            elif cp.proc is not None:
                cp.stop_requested = True
                report[cp.spec.name] = f"exited({cp.exit_code if cp.exit_code is not None else cp.proc.returncode})"
            else:
                report[cp.spec.name] = "not_started"
        end = time.monotonic() + self.grace
        for cp in procs:
            if cp.spec.name in report:
                continue
            try:
                cp.proc.wait(max(0.0, end - time.monotonic()))
                report[cp.spec.name] = "graceful"
            except subprocess.TimeoutExpired:
                self._signal_group(cp.proc, signal.SIGKILL)
                cp.proc.wait()
                report[cp.spec.name] = "forced"
            cp.state = "stopped"
        for cp in procs:
            if cp.proc is not None:
                self._signal_group(cp.proc, signal.SIGKILL)  # stragglers in the group

    def _down_locked(self) -> dict:
        if self.state == "down":
            return self.report
        self.state = "stopping"
        report = {}
        order = [self.procs[c.name] for c in reversed(self.cfg.start_order())]
        self._stop_group([cp for cp in order if cp.spec.role == "executor"], report)
        self._stop_group([cp for cp in order if cp.spec.role != "executor"], report)
        if self.relay is not None:
            self.relay.stop()
        if self.session is not None:
            self.session.close()
        if self.broker is not None:
            if self.broker.poll() is None:
                self._signal_group(self.broker, signal.SIGTERM)
                try:
                    self.broker.wait(self.grace)
                    report["broker"] = "graceful"
                except subprocess.TimeoutExpired:
                    self._signal_group(self.broker, signal.SIGKILL)
                    self.broker.wait()
                    report["broker"] = "forced"
            else:
                report["broker"] = f"exited({self.broker.returncode})"
            self._signal_group(self.broker, signal.SIGKILL)
        for t in self._pumps:
            t.join(1.0)
        self.state = "down"
        self.report = {n: report.get(n, "not_started") for n in [*self.procs, "broker"]}
        if self.exit_code is None:
            self._finish(0, "stopped on request")
        self._finished.set()
        return self.report

    def down(self) -> dict:
        """Stop everything (executors first, broker last). Safe to call twice."""
        with self._mutate:
            return self._down_locked()

    def __enter__(self):
        return self.up()

    def __exit__(self, *exc):
        self.down()


def up_instance(cfg: InstanceConfig, params: dict | None = None, **kw) -> Instance:
    return Instance(cfg, params, **kw).up()


def down_instance(handle: Instance) -> dict:
    return handle.down()
