"""Collision-warning wire format, topic scheme and publish paths.

Payloads are canonical JSON: UTF-8, fixed key order, no whitespace, floats
with at most six significant digits. Topics are ``dt/{intersection}/warn/{user}``.
"""

from __future__ import annotations

import json
import math
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence
from urllib.parse import urlparse

import numpy as np

from .latency import StageLatencyModel

VERSION = 1
KIND = "collision_warning"
KEY_ORDER = ("version", "msg_id", "created_ms", "intersection", "user", "kind", "ttc_s", "position", "hazard")
DEFAULT_QUEUE_SIZE = 1024
MQTT_URL_ENV = "DT_MQTT_URL"


class MessageError(ValueError):
    pass


class MalformedPayloadError(MessageError):
    pass


class UnsupportedVersionError(MessageError):
    pass


class InvariantViolationError(MessageError):
    pass


class QueueFullError(RuntimeError):
    pass


class BrokerUnreachableError(ConnectionError):
    pass


def round_sig(x: float) -> float:
    """Round to six significant digits, the wire precision."""
    return float(f"{float(x):.6g}") + 0.0  # + 0.0 folds -0.0


def _fmt_float(x: float) -> str:
    return f"{x:.6g}"


def _pair(value, name: str) -> tuple[float, float]:
    try:
        x, y = value
        out = (round_sig(x), round_sig(y))
    except (TypeError, ValueError) as exc:
        raise InvariantViolationError(f"{name} must be a 2-D point") from exc
    if not all(math.isfinite(v) for v in out):
        raise InvariantViolationError(f"{name} must be finite")
    return out


def _topic_level(value: str, name: str) -> str:
    if not isinstance(value, str) or not value or any(c in value for c in "/+#\x00"):
        raise InvariantViolationError(f"{name} must be a non-empty topic level without / + #")
    return value


@dataclass(frozen=True)
class WarningMessage:
    msg_id: str
    created_ms: int
    intersection: str
    user: str
    ttc_s: float
    position: tuple[float, float]
    hazard_id: str
    hazard_position: tuple[float, float]
    version: int = VERSION
    kind: str = KIND

    def __post_init__(self):
        if self.version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {self.version}")
        if self.kind != KIND:
            raise InvariantViolationError(f"unknown kind {self.kind!r}")
        if not (isinstance(self.msg_id, str) and len(self.msg_id) == 32):
            raise InvariantViolationError("msg_id must be 32 hex characters")
        try:
            int(self.msg_id, 16)
        except ValueError as exc:
            raise InvariantViolationError("msg_id must be hex") from exc
        object.__setattr__(self, "msg_id", self.msg_id.lower())
        if isinstance(self.created_ms, bool) or not isinstance(self.created_ms, (int, np.integer)):
            raise InvariantViolationError("created_ms must be an integer")
        object.__setattr__(self, "created_ms", int(self.created_ms))
        _topic_level(self.intersection, "intersection")
        _topic_level(self.user, "user")
        if not isinstance(self.hazard_id, str) or not self.hazard_id:
            raise InvariantViolationError("hazard id must be a non-empty string")
        ttc = round_sig(self.ttc_s)
        if not (math.isfinite(ttc) and ttc > 0):
            raise InvariantViolationError("ttc_s must be > 0")
        object.__setattr__(self, "ttc_s", ttc)
        object.__setattr__(self, "position", _pair(self.position, "position"))
        object.__setattr__(self, "hazard_position", _pair(self.hazard_position, "hazard position"))

    @property
    def topic(self) -> str:
        return topic_for(self.intersection, self.user)


def topic_for(intersection: str, user: str) -> str:
    return f"dt/{_topic_level(intersection, 'intersection')}/warn/{_topic_level(user, 'user')}"


def encode_warning(msg: WarningMessage) -> bytes:
    x, y = msg.position
    hx, hy = msg.hazard_position
    parts = [
        f'"version":{msg.version}',
        f'"msg_id":{json.dumps(msg.msg_id)}',
        f'"created_ms":{msg.created_ms}',
        f'"intersection":{json.dumps(msg.intersection, ensure_ascii=False)}',
        f'"user":{json.dumps(msg.user, ensure_ascii=False)}',
        f'"kind":{json.dumps(msg.kind)}',
        f'"ttc_s":{_fmt_float(msg.ttc_s)}',
        f'"position":[{_fmt_float(x)},{_fmt_float(y)}]',
        f'"hazard":{{"id":{json.dumps(msg.hazard_id, ensure_ascii=False)},"position":[{_fmt_float(hx)},{_fmt_float(hy)}]}}',
    ]
    return ("{" + ",".join(parts) + "}").encode("utf-8")


def decode_warning(payload: bytes) -> WarningMessage:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError) as exc:
        raise MalformedPayloadError(f"not a JSON payload: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedPayloadError("payload must be a JSON object")
    missing = [k for k in KEY_ORDER if k not in doc]
    if missing:
        raise MalformedPayloadError(f"missing keys: {', '.join(missing)}")
    if doc["version"] != VERSION:
        raise UnsupportedVersionError(f"unsupported version {doc['version']!r}")
    hazard = doc["hazard"]
    if not isinstance(hazard, dict) or "id" not in hazard or "position" not in hazard:
        raise MalformedPayloadError("hazard must carry id and position")
    for key in ("ttc_s",):
        if isinstance(doc[key], bool) or not isinstance(doc[key], (int, float)):
            raise InvariantViolationError(f"{key} must be a number")
    return WarningMessage(
        msg_id=doc["msg_id"],
        created_ms=doc["created_ms"],
        intersection=doc["intersection"],
        user=doc["user"],
        kind=doc["kind"],
        ttc_s=doc["ttc_s"],
        position=tuple(doc["position"]) if isinstance(doc["position"], list) else doc["position"],
        hazard_id=hazard["id"],
        hazard_position=tuple(hazard["position"]) if isinstance(hazard["position"], list) else hazard["position"],
    )


class MessageIdSource:
    """Seeded 128-bit message ids."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def __call__(self) -> str:
        return f"{self._rng.getrandbits(128):032x}"


# --------------------------------------------------------------------------
# Topic matching and the in-process broker


def topic_matches(topic_filter: str, topic: str) -> bool:
    """MQTT filter matching with ``+`` (one level) and a trailing ``#``."""
    f_levels = topic_filter.split("/")
    t_levels = topic.split("/")
    for i, f in enumerate(f_levels):
        if f == "#":
            return i == len(f_levels) - 1
        if i >= len(t_levels):
            return False
        if f != "+" and f != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


class Subscription:
    def __init__(self, topic_filter: str, maxsize: int = DEFAULT_QUEUE_SIZE):
        self.topic_filter = topic_filter
        self.maxsize = maxsize
        self._queue: deque[tuple[str, bytes]] = deque()
        self._seen: set[str] = set()

    def __len__(self) -> int:
        return len(self._queue)

    def _offer(self, topic: str, payload: bytes) -> None:
        if len(self._queue) >= self.maxsize:
            raise QueueFullError(f"subscriber queue for {self.topic_filter!r} is full")
        self._queue.append((topic, payload))

    def get(self) -> tuple[str, bytes] | None:
        return self._queue.popleft() if self._queue else None

    def drain(self) -> list[tuple[str, bytes]]:
        out = list(self._queue)
        self._queue.clear()
        return out

    def receive_warnings(self) -> list[WarningMessage]:
        """Decode queued payloads, dropping duplicate msg_ids (QoS 1 redelivery)."""
        out = []
        for _, payload in self.drain():
            msg = decode_warning(payload)
            if msg.msg_id in self._seen:
                continue
            self._seen.add(msg.msg_id)
            out.append(msg)
        return out


class LoopbackBroker:
    """Connect, subscribe (with wildcards) and publish, FIFO per topic."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()

    def subscribe(self, topic_filter: str, maxsize: int = DEFAULT_QUEUE_SIZE) -> Subscription:
        sub = Subscription(topic_filter, maxsize)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs.remove(sub)

    def publish(self, topic: str, payload: bytes) -> int:
        if any(c in topic for c in "+#"):
            raise ValueError("wildcards are not allowed in published topics")
        with self._lock:
            targets = [s for s in self._subs if topic_matches(s.topic_filter, topic)]
            for s in targets:
                if len(s) >= s.maxsize:
                    raise QueueFullError(f"subscriber queue for {s.topic_filter!r} is full")
            for s in targets:
                s._offer(topic, payload)
        return len(targets)


@dataclass(frozen=True)
class DeliveryReceipt:
    topic: str
    msg_id: str
    timestamp_ms: int


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class LoopbackTransport:
    def __init__(self, broker: LoopbackBroker | None = None, clock: Callable[[], int] = wall_clock_ms):
        self.broker = broker or LoopbackBroker()
        self.clock = clock

    def send(self, topic: str, payload: bytes) -> int:
        self.broker.publish(topic, payload)
        return self.clock()


def parse_mqtt_url(url: str) -> tuple[str, int]:
    parsed = urlparse(url if "://" in url else f"mqtt://{url}")
    if parsed.scheme not in ("mqtt", "tcp"):
        raise ValueError(f"unsupported MQTT URL scheme {parsed.scheme!r}")
    return parsed.hostname or "localhost", parsed.port or 1883


class MqttTransport:
    """MQTT 3.1.1 over TCP via paho; publishes at QoS 1."""

    def __init__(self, host: str, port: int = 1883, client_id: str = "pedtwin", timeout: float = 5.0,
                 clock: Callable[[], int] = wall_clock_ms):
        import paho.mqtt.client as mqtt

        self.timeout = timeout
        self.clock = clock
        self._client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=client_id,
                                   protocol=mqtt.MQTTv311)
        try:
            self._client.connect(host, port, keepalive=30)
        except OSError as exc:
            raise BrokerUnreachableError(f"cannot reach MQTT broker at {host}:{port}: {exc}") from exc
        self._client.loop_start()

    @classmethod
    def from_env(cls, **kwargs) -> "MqttTransport":
        url = os.environ.get(MQTT_URL_ENV)
        if not url:
            raise BrokerUnreachableError(f"{MQTT_URL_ENV} is not set")
        host, port = parse_mqtt_url(url)
        return cls(host, port, **kwargs)

    def send(self, topic: str, payload: bytes) -> int:
        info = self._client.publish(topic, payload, qos=1)
        try:
            info.wait_for_publish(timeout=self.timeout)
        except RuntimeError as exc:
            raise BrokerUnreachableError(str(exc)) from exc
        if not info.is_published():
            raise BrokerUnreachableError(f"no PUBACK for {topic} within {self.timeout}s")
        return self.clock()

    def close(self) -> None:
        self._client.disconnect()
        self._client.loop_stop()


def publish(msg: WarningMessage, transport) -> DeliveryReceipt:
    """Encode and send ``msg`` on its user topic; returns the send timestamp."""
    ts = transport.send(msg.topic, encode_warning(msg))
    return DeliveryReceipt(msg.topic, msg.msg_id, int(ts))


def retrieval_latency(receipts: Sequence[tuple[float, float]], network_model: StageLatencyModel,
                      rng: np.random.Generator | int = 0) -> np.ndarray:
    """Observed publish-to-receive gaps plus a synthetic network delay drawn
    from ``network_model`` (ms)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pairs = np.asarray(receipts, dtype=float).reshape(-1, 2)
    observed = pairs[:, 1] - pairs[:, 0]
    if np.any(observed < 0):
        raise ValueError("receive precedes publish")
    return observed + network_model.sample(rng, len(pairs))
