"""Blocking bus client with a background receive thread.

The receive loop never runs user code that may block: service handlers
execute on a separate worker thread, and ``call`` waits on a future, so
replies and subscription traffic keep flowing during an in-flight call.
Subscription callbacks do run on the receive thread and must be quick.
"""

from __future__ import annotations

import itertools
import logging
import os
import queue
import socket
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Any, Callable

from coral.bus import protocol as P
from coral.bus.broker import parse_addr

log = logging.getLogger("coral.bus")

_CLOSED = object()


class BusError(Exception):
    pass


class TransportError(BusError):
    """Connection to the broker failed or was lost."""


class CallTimeout(BusError):
    pass


class ServiceError(BusError):
    """The broker or the server answered a request with ERR."""

    def __init__(self, reason: str, channel: str = ""):
        super().__init__(f"{reason} ({channel})" if channel else reason)
        self.reason = reason
        self.channel = channel


class PendingCall:
    """Handle for an asynchronous service call."""

    def __init__(self, client: "BusClient", call_id: int, channel: str, timeout: float | None):
        self._client = client
        self.id = call_id
        self.channel = channel
        self.future: Future = Future()
        self.deadline = None if timeout is None else time.monotonic() + timeout
        self.cancelled = False

    def expired(self) -> bool:
        return self.deadline is not None and time.monotonic() >= self.deadline

    def done(self) -> bool:
        return self.future.done() or self.expired()

    def result(self, timeout: float | None = None) -> Any:
        if self.deadline is not None:
            remaining = max(0.0, self.deadline - time.monotonic())
            timeout = remaining if timeout is None else min(timeout, remaining)
        try:
            return self.future.result(timeout)
        except FutureTimeout:
            self.cancel()
            raise CallTimeout(f"call to {self.channel!r} timed out") from None

    def cancel(self) -> None:
        """Forget the call; a late reply is discarded."""
        self.cancelled = True
        self._client._pending.pop(self.id, None)


class Subscription:
    def __init__(self, client: "BusClient", channel: str, prefix: bool,
                 callback: Callable[[P.Envelope], None] | None):
        self._client = client
        self.channel = channel
        self.prefix = prefix
        self.callback = callback
        self.queue: queue.Queue = queue.Queue()
        self.latest: Any = None
        self.received = 0

    def matches(self, ch: str) -> bool:
        return ch.startswith(self.channel) if self.prefix else ch == self.channel

    def _deliver(self, env: P.Envelope) -> None:
        self.latest = env.data
        self.received += 1
        if self.callback is not None:
            try:
                self.callback(env)
            except Exception:
                log.exception("subscription callback for %s failed", self.channel)
        else:
            self.queue.put(env)

    def next(self, timeout: float | None = None) -> P.Envelope:
        """Next envelope on this subscription; raises CallTimeout when none arrives."""
        try:
            item = self.queue.get(timeout=timeout)
        except queue.Empty:
            raise CallTimeout(f"no message on {self.channel!r} within {timeout}s") from None
        if item is _CLOSED:
            self.queue.put(_CLOSED)
            raise TransportError("connection closed")
        return item

    def drain(self) -> list[P.Envelope]:
        out = []
        while True:
            try:
                item = self.queue.get_nowait()
            except queue.Empty:
                return out
            if item is _CLOSED:
                self.queue.put(_CLOSED)
                return out
            out.append(item)

    def close(self) -> None:
        self._client._unsubscribe(self)


class ServiceRegistration:
    def __init__(self, client: "BusClient", channel: str):
        self._client = client
        self.channel = channel


class BusClient:
    def __init__(self, addr: str | None = None, client_id: str | None = None,
                 timeout: float = 5.0):
        self.addr = addr or os.environ.get("CORAL_BUS_ADDR", "127.0.0.1:7447")
        self.requested_id = client_id if client_id is not None else os.environ.get("CORAL_CLIENT_ID", "")
        self.timeout = timeout
        self.client_id: str | None = None
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._pending: dict[int, PendingCall] = {}
        self._acks: dict[int, Future] = {}
        self._subs: list[Subscription] = []
        self._subs_lock = threading.Lock()
        self._handlers: dict[str, Callable[[Any], Any]] = {}
        self._workers: ThreadPoolExecutor | None = None
        self._reader: threading.Thread | None = None
        self._closed = threading.Event()

    # -- connection -------------------------------------------------------

    def connect(self) -> "BusClient":
        host, port = parse_addr(self.addr)
        try:
            sock = socket.create_connection((host, port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach broker at {self.addr}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        decoder = P.FrameDecoder()
        try:
            sock.sendall(P.encode_frame(P.Envelope(op=P.HELLO, src=self.requested_id or "")))
            hello = None
            while hello is None:
                chunk = sock.recv(65536)
                if not chunk:
                    raise TransportError("broker closed connection during handshake")
                frames = decoder.feed(chunk)
                if frames:
                    hello = frames[0]
        except (OSError, P.FrameError) as exc:
            sock.close()
            raise TransportError(f"handshake with {self.addr} failed: {exc}") from exc
        if hello.op != P.HELLO:
            sock.close()
            raise TransportError(f"unexpected handshake reply {hello.op}")
        self.client_id = hello.data["client_id"]
        sock.settimeout(None)
        self._workers = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"coral-srv-{self.client_id}")
        self._reader = threading.Thread(target=self._read_loop, args=(decoder,),
                                        name=f"coral-rx-{self.client_id}", daemon=True)
        self._reader.start()
        return self

    @property
    def connected(self) -> bool:
        return self._sock is not None and not self._closed.is_set()

    def close(self) -> None:
        if self._sock is None or self._closed.is_set():
            return
        try:
            self._send(P.Envelope(op=P.BYE, src=self.client_id or ""))
        except TransportError:
            pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=2)
        self._shutdown("client closed")

    def __enter__(self):
        if self._sock is None:
            self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def _shutdown(self, reason: str) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        err = TransportError(reason)
        for call in list(self._pending.values()):
            if not call.future.done():
                call.future.set_exception(err)
        self._pending.clear()
        for fut in list(self._acks.values()):
            if not fut.done():
                fut.set_exception(err)
        self._acks.clear()
        with self._subs_lock:
            for sub in self._subs:
                sub.queue.put(_CLOSED)
        if self._workers is not None:
            self._workers.shutdown(wait=False)

    def _send(self, env: P.Envelope) -> None:
        if self._sock is None:
            raise TransportError("not connected")
        if self._closed.is_set():
            raise TransportError("connection closed")
        frame = P.encode_frame(env)
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                self._shutdown(f"send failed: {exc}")
                raise TransportError(f"send failed: {exc}") from exc

    def _request_ack(self, env: P.Envelope, timeout: float | None = None) -> P.Envelope:
        fut: Future = Future()
        self._acks[env.id] = fut
        self._send(env)
        try:
            return fut.result(self.timeout if timeout is None else timeout)
        except FutureTimeout:
            raise CallTimeout(f"broker did not acknowledge {env.op} {env.ch!r}") from None
        finally:
            self._acks.pop(env.id, None)

    # -- receive side -----------------------------------------------------

    def _read_loop(self, decoder: P.FrameDecoder) -> None:
        reason = "connection closed by broker"
        try:
            for env in decoder.feed(b""):
                self._dispatch(env)
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                for env in decoder.feed(chunk):
                    self._dispatch(env)
        except (OSError, P.FrameError) as exc:
            reason = f"connection lost: {exc}"
        finally:
            self._shutdown(reason)

    def _dispatch(self, env: P.Envelope) -> None:
        op = env.op
        if op == P.PUB:
            with self._subs_lock:
                targets = [s for s in self._subs if s.matches(env.ch)]
            for sub in targets:
                sub._deliver(env)
        elif op == P.SRV_REP:
            call = self._pending.pop(env.id, None)
            if call is not None and not call.future.done():
                call.future.set_result(env.data)
        elif op == P.SRV_CALL:
            self._workers.submit(self._serve_one, env)
        elif op == P.ERR:
            reason = env.data.get("reason", "error") if isinstance(env.data, dict) else "error"
            ack = self._acks.get(env.id)
            if ack is not None and not ack.done():
                ack.set_exception(ServiceError(reason, env.ch))
                return
            call = self._pending.pop(env.id, None)
            if call is not None and not call.future.done():
                call.future.set_exception(ServiceError(reason, env.ch))
            elif call is None and env.id == 0:
                log.warning("broker error: %s", env.data)
        elif op in (P.SUB, P.UNSUB, P.SRV_REG, P.ADV):
            ack = self._acks.get(env.id)
            if ack is not None and not ack.done():
                ack.set_result(env)

    def _serve_one(self, env: P.Envelope) -> None:
        handler = self._handlers.get(env.ch)
        try:
            if handler is None:
                raise LookupError(f"no handler for {env.ch}")
            reply = handler(env.data)
            out = P.Envelope(op=P.SRV_REP, ch=env.ch, id=env.id, src=self.client_id, data=reply)
            try:
                self._send(out)
            except P.EncodeError as exc:
                log.error("reply on %s not encodable: %s", env.ch, exc)
                self._send(P.Envelope(op=P.ERR, ch=env.ch, id=env.id, src=self.client_id,
                                      data={"reason": "bad_reply"}))
        except TransportError:
            pass
        except Exception as exc:
            log.exception("service handler %s failed", env.ch)
            try:
                self._send(P.Envelope(op=P.ERR, ch=env.ch, id=env.id, src=self.client_id,
                                      data={"reason": "handler_error", "detail": str(exc)}))
            except TransportError:
                pass

    # -- public operations ------------------------------------------------

    def publish(self, ch: str, data: Any = None) -> None:
        self._send(P.Envelope(op=P.PUB, ch=ch, id=next(self._ids), src=self.client_id, data=data))

    def subscribe(self, ch: str, callback: Callable[[P.Envelope], None] | None = None,
                  prefix: bool = False) -> Subscription:
        """Subscribe and wait for the broker's acknowledgement.

        Once this returns, every later publication on ``ch`` is delivered.
        """
        sub = Subscription(self, ch, prefix, callback)
        with self._subs_lock:
            self._subs.append(sub)
        try:
            self._request_ack(P.Envelope(op=P.SUB, ch=ch, id=next(self._ids), src=self.client_id,
                                         data={"prefix": True} if prefix else None))
        except BusError:
            with self._subs_lock:
                self._subs.remove(sub)
            raise
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._subs_lock:
            if sub not in self._subs:
                return
            self._subs.remove(sub)
            still = any(s.channel == sub.channel and s.prefix == sub.prefix for s in self._subs)
        if not still and self.connected:
            try:
                self._request_ack(P.Envelope(op=P.UNSUB, ch=sub.channel, id=next(self._ids),
                                             src=self.client_id))
            except BusError:
                pass

    def next_message(self, ch: str, timeout: float | None = None) -> P.Envelope:
        """Wait for the next message on ``ch``, subscribing first if needed."""
        with self._subs_lock:
            sub = next((s for s in self._subs if s.channel == ch and not s.prefix
                        and s.callback is None), None)
        if sub is None:
            sub = self.subscribe(ch)
        return sub.next(timeout)

    def call_async(self, ch: str, data: Any = None, timeout: float | None = None) -> PendingCall:
        call = PendingCall(self, next(self._ids), ch, timeout)
        self._pending[call.id] = call
        try:
            self._send(P.Envelope(op=P.SRV_CALL, ch=ch, id=call.id, src=self.client_id, data=data))
        except BusError:
            self._pending.pop(call.id, None)
            raise
        return call

    def call(self, ch: str, data: Any = None, timeout: float | None = None) -> Any:
        return self.call_async(ch, data, timeout if timeout is not None else self.timeout).result()

    def serve(self, ch: str, handler: Callable[[Any], Any]) -> ServiceRegistration:
        """Register as the server of ``ch``; raises ServiceError('service_taken')."""
        self._handlers[ch] = handler
        try:
            self._request_ack(P.Envelope(op=P.SRV_REG, ch=ch, id=next(self._ids),
                                         src=self.client_id))
        except BusError:
            self._handlers.pop(ch, None)
            raise
        return ServiceRegistration(self, ch)


def connect(addr: str | None = None, client_id: str | None = None, retry_for: float = 0.0,
            timeout: float = 5.0) -> BusClient:
    """Connect, retrying for up to ``retry_for`` seconds while the broker comes up."""
    deadline = time.monotonic() + retry_for
    delay = 0.05
    while True:
        try:
            return BusClient(addr, client_id, timeout=timeout).connect()
        except TransportError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(delay)
            delay = min(delay * 2, 0.5)
