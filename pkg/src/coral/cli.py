"""``coral`` command line: up, validate, down, logs.

Exit codes: 0 ok, 2 configuration error, 3 readiness failure, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

from coral.btxml import load_tree, validate_tree
from coral.composer import Instance, load_compose, load_params
from coral.errors import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError, CoralError

HANDLE_POLL = 0.1
_print_lock = threading.Lock()


def _say(msg: str, err: bool = False) -> None:
    with _print_lock:
        print(msg, file=sys.stderr if err else sys.stdout, flush=True)


def _fail(exc: CoralError) -> int:
    _say(f"coral: {exc}", err=True)
    return exc.exit_code


def state_dir(args) -> Path:
    return Path(args.state_dir or os.environ.get("CORAL_STATE_DIR") or Path.cwd() / ".coral").resolve()


def handle_path(sdir: Path, instance_id: str) -> Path:
    return sdir / f"{instance_id}.json"


def _write_handle(path: Path, data: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2))
    tmp.replace(path)


def _read_handle(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _alive(pid) -> bool:
    if not pid:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:  # a zombie child of ours still answers kill(0)
        done, _ = os.waitpid(pid, os.WNOHANG)
        return done == 0
    except ChildProcessError:
        return True


# -- validate -------------------------------------------------------------------

def _count_lines(path: Path) -> int:
    with open(path, "rb") as fh:
        return sum(1 for _ in fh)


def validate_files(composes, params_files=()) -> dict:
    """Parse and cross-check every file; never starts a process."""
    files, diags = {}, []

    def note(path, kind):
        path = Path(path).resolve()
        if path not in files and path.exists():
            files[path] = {"path": str(path), "kind": kind, "lines": _count_lines(path)}

    params_files = list(params_files)
    for i, compose in enumerate(composes):
        try:
            cfg = load_compose(compose)
        except CoralError as exc:
            diags.append({"file": str(compose), "message": str(exc)})
            continue
        note(compose, "compose")
        pfile = params_files[i] if i < len(params_files) else cfg.params_file
        params = {}
        if pfile:
            try:
                params = load_params(pfile)
                note(pfile, "params")
            except CoralError as exc:
                diags.append({"file": str(pfile), "message": str(exc)})
        names = {c.params_ns for c in cfg.components}
        for ns in sorted(set(params) - names):
            diags.append({"file": str(pfile), "message": f"params for unknown component {ns!r}",
                          "warning": True})
        skillsets = cfg.by_role("skillset")
        declared = all(s.exports is not None for s in skillsets)
        exports = {e for s in skillsets for e in (s.exports or [])}
        for ex in cfg.by_role("executor"):
            try:
                spec = load_tree(ex.tree)
            except CoralError as exc:
                diags.append({"file": str(ex.tree), "message": str(exc)})
                continue
            note(ex.tree, "tree")
            # without declared exports only the structure can be checked
            known = exports if declared else {n.name for t in spec.trees.values()
                                              for n in t.leaves() if n.name}
            for d in validate_tree(spec, known):
                diags.append({"file": str(ex.tree), "path": d.path, "message": d.message})
    errors = [d for d in diags if not d.get("warning")]
    return {"ok": not errors, "files": list(files.values()), "file_count": len(files),
            "total_lines": sum(f["lines"] for f in files.values()), "diagnostics": diags}


def cmd_validate(args) -> int:
    summary = validate_files(args.file, args.params or [])
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for d in summary["diagnostics"]:
            where = f"{d['file']}" + (f" [{d['path']}]" if d.get("path") else "")
            level = "warning" if d.get("warning") else "error"
            _say(f"{level}: {where}: {d['message']}")
        _say(f"{'ok' if summary['ok'] else 'invalid'}: {summary['file_count']} files, "
             f"{summary['total_lines']} lines")
    return EXIT_OK if summary["ok"] else EXIT_CONFIG


# -- up -------------------------------------------------------------------------------

def _load(args):
    cfg = load_compose(args.file)
    params = load_params(args.params or cfg.params_file)
    summary = validate_files([args.file], [args.params] if args.params else [])
    errors = [d for d in summary["diagnostics"] if not d.get("warning")]
    if errors:
        d = errors[0]
        raise ConfigError(f"{d['file']}: {d.get('path', '')}{': ' if d.get('path') else ''}{d['message']}")
    return cfg, params


def _handle_data(inst: Instance, state: str, **extra) -> dict:
    return {"instance_id": inst.cfg.instance_id, "state": state, "supervisor_pid": os.getpid(),
            "bus": inst.bus_addr, "compose": str(inst.cfg.source), "log_dir": str(inst.log_dir),
            "run_id": inst.run_id,
            "components": {n: cp.pid for n, cp in inst.procs.items()},
            "broker_pid": inst.broker.pid if inst.broker else None, **extra}


def _run_instance(args, echo, on_state=None) -> int:
    """Bring an instance up, wait for it to finish or be stopped, tear it down."""
    try:
        cfg, params = _load(args)
    except CoralError as exc:
        return _fail(exc)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *a: stop.set())
    inst = Instance(cfg, params, state_dir=state_dir(args), grace=args.grace, echo=echo)
    notify = on_state or (lambda inst, state, **kw: None)
    try:
        inst.up()
    except CoralError as exc:
        notify(inst, "failed", exit_code=exc.exit_code, message=str(exc), report=inst.report)
        return _fail(exc)
    notify(inst, "running")
    _say(f"coral: instance {cfg.instance_id} up on {inst.bus_addr}", err=True)
    while not stop.is_set() and not inst.finished:
        stop.wait(0.2)
    interrupted = stop.is_set() and not inst.finished
    report = inst.down()
    code = EXIT_OK if interrupted else (inst.exit_code or EXIT_OK)
    for name, how in report.items():
        _say(f"coral: {name}: {how}", err=True)
    if not interrupted:
        _say(f"coral: {inst.message} (exit {code})", err=True)
    notify(inst, "down", exit_code=code, message=inst.message, report=report)
    return code


def cmd_up(args) -> int:
    if args.detach:
        return _detach(args)
    echo = None if args.quiet else (lambda line: _say(line))
    return _run_instance(args, echo)


def _detach(args) -> int:
    try:
        cfg, _ = _load(args)
    except CoralError as exc:
        return _fail(exc)
    sdir = state_dir(args)
    sdir.mkdir(parents=True, exist_ok=True)
    hpath = handle_path(sdir, cfg.instance_id)
    old = _read_handle(hpath)
    if old and old.get("state") in ("starting", "running") and _alive(old.get("supervisor_pid")):
        _say(f"coral: instance {cfg.instance_id} is already running", err=True)
        return EXIT_CONFIG
    hpath.unlink(missing_ok=True)
    (sdir / cfg.instance_id).mkdir(parents=True, exist_ok=True)
    argv = [sys.executable, "-m", "coral.cli", "_supervise", "-f", str(Path(args.file).resolve()),
            "--state-dir", str(sdir), "--grace", str(args.grace)]
    if args.params:
        argv += ["-p", str(Path(args.params).resolve())]
    with open(sdir / cfg.instance_id / "supervisor.log", "a") as log:
        proc = subprocess.Popen(argv, stdout=log, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
                                start_new_session=True)
    while True:
        h = _read_handle(hpath)
        if h and h.get("state") == "running":
            _say(f"coral: instance {cfg.instance_id} running on {h['bus']} "
                 f"(supervisor pid {h['supervisor_pid']})")
            return EXIT_OK
        if h and h.get("state") in ("failed", "down"):
            proc.wait()
            _say(f"coral: {h.get('message', 'instance failed')}", err=True)
            return h.get("exit_code") or EXIT_RUNTIME
        if proc.poll() is not None:
            h = _read_handle(hpath) or {}
            _say(f"coral: supervisor exited ({proc.returncode}); see "
                 f"{sdir / cfg.instance_id / 'supervisor.log'}", err=True)
            return h.get("exit_code") or EXIT_RUNTIME
        time.sleep(HANDLE_POLL)


def cmd_supervise(args) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sdir = state_dir(args)

    def on_state(inst, state, **extra):
        _write_handle(handle_path(sdir, inst.cfg.instance_id), _handle_data(inst, state, **extra))

    return _run_instance(args, echo=None, on_state=on_state)


# -- down / logs -------------------------------------------------------------------------

def cmd_down(args) -> int:
    sdir = state_dir(args)
    hpath = handle_path(sdir, args.instance_id)
    h = _read_handle(hpath)
    if h is None:
        _say(f"coral: no instance {args.instance_id!r} under {sdir}", err=True)
        return EXIT_CONFIG
    pid = h.get("supervisor_pid")
    if _alive(pid):
        os.kill(pid, signal.SIGTERM)
        end = time.monotonic() + args.timeout
        while _alive(pid) and time.monotonic() < end:
            time.sleep(HANDLE_POLL)
        if _alive(pid):
            os.kill(pid, signal.SIGKILL)
        h = _read_handle(hpath) or h
    # anything the supervisor could not clean up (it may have been killed)
    for cpid in [*(h.get("components") or {}).values(), h.get("broker_pid")]:
        if cpid:
            try:
                os.killpg(cpid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
    for name, how in (h.get("report") or {}).items():
        _say(f"{name}: {how}")
    hpath.unlink(missing_ok=True)
    _say(f"coral: instance {args.instance_id} down")
    return EXIT_OK


def cmd_logs(args) -> int:
    path = state_dir(args) / args.instance_id / "logs" / f"{args.component}.log"
    if not path.exists():
        _say(f"coral: no logs for {args.component!r} in instance {args.instance_id!r}", err=True)
        return EXIT_CONFIG
    sys.stdout.write(path.read_text())
    sys.stdout.flush()
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state-dir", help="where handles and logs live (default ./.coral)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="coral", description="compose and run Coral instances")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    up = sub.add_parser("up", parents=[common], help="start an instance from a compose file")
    up.add_argument("-f", "--file", required=True)
    up.add_argument("-p", "--params")
    up.add_argument("-d", "--detach", action="store_true")
    up.add_argument("-q", "--quiet", action="store_true", help="do not stream component output")
    up.add_argument("--grace", type=float, default=5.0, help="seconds between stop and kill")
    up.set_defaults(fn=cmd_up)

    val = sub.add_parser("validate", parents=[common], help="check config files without starting anything")
    val.add_argument("-f", "--file", action="append", required=True)
    val.add_argument("-p", "--params", action="append")
    val.add_argument("--json", action="store_true")
    val.set_defaults(fn=cmd_validate)

    down = sub.add_parser("down", parents=[common], help="stop a detached instance")
    down.add_argument("instance_id")
    down.add_argument("--timeout", type=float, default=30.0)
    down.set_defaults(fn=cmd_down)

    logs = sub.add_parser("logs", parents=[common], help="print a component's captured output")
    logs.add_argument("instance_id")
    logs.add_argument("component")
    logs.set_defaults(fn=cmd_logs)

    sv = sub.add_parser("_supervise", parents=[common])  # internal: the detached supervisor
    sv.add_argument("-f", "--file", required=True)
    sv.add_argument("-p", "--params")
    sv.add_argument("--grace", type=float, default=5.0)
    sv.set_defaults(fn=cmd_supervise)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except CoralError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
