"""Central message broker for one coral instance.

Routes PUB envelopes to subscribers and SRV_CALL envelopes to the single
registered server of a service channel. Call ids are rewritten to
broker-unique ids on the way to the server and restored on the way back,
so a caller only ever sees replies to ids it issued.

Run standalone with ``python -m coral.bus --listen 127.0.0.1:7447``.
"""

from __future__ import annotations

import argparse
import asyncio
import itertools
import logging
import signal
import struct
import threading
from dataclasses import dataclass, field

from coral.bus import protocol as P

log = logging.getLogger("coral.broker")

DEFAULT_ADDR = "127.0.0.1:7447"


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"bus address must be host:port, got {addr!r}")
    return host, int(port)


@dataclass(eq=False)
class _Session:
    client_id: str
    writer: asyncio.StreamWriter
    subscriptions: set = field(default_factory=set)
    prefixes: set = field(default_factory=set)
    served: set = field(default_factory=set)
    # broker id -> (caller session, caller's id, channel) for calls we serve
    inflight: dict = field(default_factory=dict)
    closed: bool = False

    def send(self, env: P.Envelope) -> None:
        if self.closed:
            return
        try:
            self.writer.write(P.encode_frame(env))
        except (P.EncodeError, RuntimeError, ConnectionError) as exc:
            log.warning("dropping frame to %s: %s", self.client_id, exc)


class Broker:
    def __init__(self, host: str = "127.0.0.1", port: int = 7447):
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._sessions: dict[str, _Session] = {}
        self._services: dict[str, _Session] = {}
        self._ids = itertools.count(1)
        self._anon = itertools.count(1)

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self) -> str:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        sock = self._server.sockets[0]
        self.port = sock.getsockname()[1]
        log.info("broker listening on %s", self.address)
        return self.address

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for sess in list(self._sessions.values()):
            sess.writer.close()

    def sessions(self) -> list[str]:
        return sorted(self._sessions)

    async def _read_envelope(self, reader: asyncio.StreamReader) -> P.Envelope:
        header = await reader.readexactly(P.HEADER_SIZE)
        (length,) = struct.unpack(">I", header)
        if length > P.MAX_BODY_SIZE:
            raise P.ProtocolError(f"frame length {length} exceeds limit")
        body = await reader.readexactly(length)
        return P.decode_body(body)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sess = None
        try:
            hello = await self._read_envelope(reader)
            if hello.op != P.HELLO:
                raise P.ProtocolError("first frame must be HELLO")
            sess = self._open_session(hello, writer)
            while True:
                env = await self._read_envelope(reader)
                if env.op == P.BYE:
                    break
                self._dispatch(sess, env)
                await writer.drain()
        except asyncio.IncompleteReadError:
            pass
        except P.ProtocolError as exc:
            log.warning("protocol error from %s: %s", sess.client_id if sess else "?", exc)
            err = P.Envelope(op=P.ERR, src="broker", data={"reason": "protocol_error",
                                                           "detail": str(exc)})
            try:
                writer.write(P.encode_frame(err))
            except Exception:
                pass
        except (ConnectionError, OSError):
            pass
        finally:
            if sess is not None:
                self._close_session(sess)
            writer.close()

    def _open_session(self, hello: P.Envelope, writer) -> _Session:
        wanted = hello.src
        if not wanted or wanted in self._sessions:
            wanted = f"c{next(self._anon)}"
            while wanted in self._sessions:
                wanted = f"c{next(self._anon)}"
        sess = _Session(wanted, writer)
        self._sessions[wanted] = sess
        sess.send(P.Envelope(op=P.HELLO, id=hello.id, src="broker",
                             data={"client_id": wanted}))
        return sess

    def _close_session(self, sess: _Session) -> None:
        sess.closed = True
        self._sessions.pop(sess.client_id, None)
        for ch in sess.served:
            if self._services.get(ch) is sess:
                del self._services[ch]
        # callers waiting on this server get an error instead of hanging
        for caller, caller_id, ch in sess.inflight.values():
            caller.send(P.Envelope(op=P.ERR, ch=ch, id=caller_id, src="broker",
                                   data={"reason": "server_gone"}))
        sess.inflight.clear()

    def _ack(self, sess: _Session, env: P.Envelope) -> None:
        sess.send(P.Envelope(op=env.op, ch=env.ch, id=env.id, src="broker"))

    def _error(self, sess: _Session, env: P.Envelope, reason: str) -> None:
        sess.send(P.Envelope(op=P.ERR, ch=env.ch, id=env.id, src="broker",
                             data={"reason": reason}))

    def _dispatch(self, sess: _Session, env: P.Envelope) -> None:
        op = env.op
        if op == P.PUB:
            out = P.Envelope(op=P.PUB, ch=env.ch, id=env.id, src=sess.client_id, data=env.data)
            for other in list(self._sessions.values()):
                if env.ch in other.subscriptions or any(env.ch.startswith(p) for p in other.prefixes):
                    other.send(out)
        elif op == P.SUB:
            if isinstance(env.data, dict) and env.data.get("prefix"):
                sess.prefixes.add(env.ch)
            else:
                sess.subscriptions.add(env.ch)
            self._ack(sess, env)
        elif op == P.UNSUB:
            sess.subscriptions.discard(env.ch)
            sess.prefixes.discard(env.ch)
            self._ack(sess, env)
        elif op == P.ADV:
            self._ack(sess, env)
        elif op == P.SRV_REG:
            holder = self._services.get(env.ch)
            if holder is not None and holder is not sess:
                self._error(sess, env, "service_taken")
                return
            self._services[env.ch] = sess
            sess.served.add(env.ch)
            self._ack(sess, env)
        elif op == P.SRV_CALL:
            server = self._services.get(env.ch)
            if server is None:
                self._error(sess, env, "no_such_service")
                return
            bid = next(self._ids)
            server.inflight[bid] = (sess, env.id, env.ch)
            server.send(P.Envelope(op=P.SRV_CALL, ch=env.ch, id=bid, src=sess.client_id,
                                   data=env.data))
        elif op == P.SRV_REP:
            entry = sess.inflight.pop(env.id, None)
            if entry is None:
                return  # late or bogus reply; the caller is gone
            caller, caller_id, ch = entry
            caller.send(P.Envelope(op=P.SRV_REP, ch=ch, id=caller_id, src=sess.client_id,
                                   data=env.data))
        elif op == P.ERR:
            # a server reporting handler failure for a call it received
            entry = sess.inflight.pop(env.id, None)
            if entry is not None:
                caller, caller_id, ch = entry
                data = env.data if isinstance(env.data, dict) else {"reason": "server_error"}
                caller.send(P.Envelope(op=P.ERR, ch=ch, id=caller_id, src=sess.client_id,
                                       data=data))
        elif op == P.HELLO:
            raise P.ProtocolError("duplicate HELLO")


class BrokerThread:
    """Broker running on a private event loop in a daemon thread."""

    def __init__(self, addr: str = "127.0.0.1:0"):
        host, port = parse_addr(addr)
        self.broker = Broker(host, port)
        self._loop = asyncio.new_event_loop()
        self._ready = threading.Event()
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, name="coral-broker", daemon=True)

    def _run(self) -> None:
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.broker.start())
        except BaseException as exc:
            self._error = exc
            self._ready.set()
            return
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.broker.stop())
        # connection handlers still parked in a read
        pending = asyncio.all_tasks(self._loop)
        for task in pending:
            task.cancel()
        self._loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        self._loop.close()

    def start(self) -> str:
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self.broker.address

    @property
    def address(self) -> str:
        return self.broker.address

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


async def _serve(addr: str) -> None:
    host, port = parse_addr(addr)
    broker = Broker(host, port)
    actual = await broker.start()
    print(f"coral-broker listening on {actual}", flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await broker.stop()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coral-broker")
    parser.add_argument("--listen", default=DEFAULT_ADDR)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        parse_addr(args.listen)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        asyncio.run(_serve(args.listen))
    except OSError as exc:
        print(f"coral-broker: cannot listen on {args.listen}: {exc}", flush=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
