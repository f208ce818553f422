"""Broker-based message bus: topics (pub/sub) and services (request/reply)."""

from coral.bus.broker import DEFAULT_ADDR, Broker, BrokerThread, parse_addr
from coral.bus.client import (
    BusClient,
    BusError,
    CallTimeout,
    PendingCall,
    ServiceError,
    Subscription,
    TransportError,
    connect,
)
from coral.bus.protocol import (
    MAX_BODY_SIZE,
    Envelope,
    FrameDecoder,
    IncompleteFrame,
    EncodeError,
    ProtocolError,
    decode_frame,
    encode_frame,
)

__all__ = [
    "DEFAULT_ADDR", "Broker", "BrokerThread", "parse_addr",
    "BusClient", "BusError", "CallTimeout", "PendingCall", "ServiceError", "Subscription",
    "TransportError", "connect",
    "MAX_BODY_SIZE", "Envelope", "FrameDecoder", "IncompleteFrame", "EncodeError",
    "ProtocolError", "decode_frame", "encode_frame",
]
