"""Anonymous device/coordinator wire messages, their codec, and the channel model.

Wire format: one record per message, ``<decimal body length>\\n<body>`` where the
body is UTF-8 text of ``tag=value`` lines. Unknown tags are ignored so newer
peers can add fields. No message carries a device identity.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields

import numpy as np


class Kind(str, enum.Enum):
    REQUEST = "REQUEST"
    RESPONSE = "RESPONSE"
    OPT_OUT_NOTICE = "OPT_OUT_NOTICE"
    RELEASE = "RELEASE"
    DEMAND_MEASUREMENT = "DEMAND_MEASUREMENT"


class DecodeError(ValueError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"{field_name}: {detail}")
        self.field = field_name


@dataclass(frozen=True)
class PacketMessage:
    """A single wire message.

    ``direction`` is +1 for charge and -1 for discharge. For OPT_OUT_NOTICE a
    positive ``packet_length`` announces a forced packet (a timer should run);
    zero means the packet carrying ``correlation_nonce`` stopped early.
    RELEASE withdraws an acceptance the device could not use.
    """

    kind: Kind
    direction: int = 0
    rated_power: float | None = None
    packet_length: float | None = None
    accept: bool | None = None
    measured_demand: float | None = None
    correlation_nonce: str | None = None
    timestamp_sent: float | None = None

    @classmethod
    def request(cls, direction, rated_power, packet_length, nonce, sent=None):
        return cls(Kind.REQUEST, direction, float(rated_power), float(packet_length),
                   correlation_nonce=nonce, timestamp_sent=sent)

    @classmethod
    def response(cls, accept, nonce, sent=None):
        return cls(Kind.RESPONSE, accept=bool(accept), correlation_nonce=nonce, timestamp_sent=sent)

    @classmethod
    def opt_out(cls, direction, rated_power, packet_length, nonce, sent=None):
        return cls(Kind.OPT_OUT_NOTICE, direction, float(rated_power), float(packet_length),
                   correlation_nonce=nonce, timestamp_sent=sent)

    @classmethod
    def release(cls, direction, rated_power, nonce, sent=None):
        return cls(Kind.RELEASE, direction, float(rated_power), correlation_nonce=nonce,
                   timestamp_sent=sent)

    @classmethod
    def measurement(cls, demand, sent=None):
        return cls(Kind.DEMAND_MEASUREMENT, measured_demand=float(demand), timestamp_sent=sent)

    def stamped(self, now: float) -> "PacketMessage":
        return PacketMessage(**{**self.__dict__, "timestamp_sent": float(now)})


_TAGS = {
    "kind": "k",
    "direction": "dir",
    "rated_power": "p",
    "packet_length": "len",
    "accept": "acc",
    "measured_demand": "dem",
    "correlation_nonce": "n",
    "timestamp_sent": "ts",
}
_FIELDS = {v: k for k, v in _TAGS.items()}
_FLOATS = {"rated_power", "packet_length", "measured_demand", "timestamp_sent"}


def encode(msg: PacketMessage) -> bytes:
    lines = []
    for f in fields(PacketMessage):
        value = getattr(msg, f.name)
        if value is None:
            continue
        if f.name == "kind":
            text = value.value
        elif f.name == "accept":
            text = "1" if value else "0"
        elif f.name in _FLOATS:
            text = repr(float(value))
        elif f.name == "direction":
            if value == 0:
                continue
            text = str(int(value))
        else:
            text = str(value)
        if "\n" in text or "=" in text:
            raise ValueError(f"{f.name} cannot contain separators")
        lines.append(f"{_TAGS[f.name]}={text}")
    body = "\n".join(lines).encode("utf-8")
    return str(len(body)).encode("ascii") + b"\n" + body


def decode(data: bytes) -> PacketMessage:
    msg, rest = decode_stream(data)
    if rest:
        raise DecodeError("record", f"{len(rest)} trailing bytes")
    return msg


def decode_stream(data: bytes) -> tuple[PacketMessage, bytes]:
    """Decode the first record of ``data``; return it and the unread remainder."""
    head, sep, tail = data.partition(b"\n")
    if not sep:
        raise DecodeError("length", "missing length prefix")
    try:
        length = int(head.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise DecodeError("length", f"bad length prefix {head[:20]!r}") from None
    if length < 0:
        raise DecodeError("length", "negative length")
    if len(tail) < length:
        raise DecodeError("record", f"truncated: expected {length} bytes, got {len(tail)}")
    body, rest = tail[:length], tail[length:]
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise DecodeError("record", "body is not UTF-8") from None
    values: dict = {}
    for line in text.split("\n") if text else []:
        tag, eq, raw = line.partition("=")
        if not eq:
            raise DecodeError(tag or "record", "missing '='")
        name = _FIELDS.get(tag)
        if name is None:
            continue
        values[name] = _parse(name, raw)
    if "kind" not in values:
        raise DecodeError("kind", "missing")
    return PacketMessage(**values), rest


def _parse(name: str, raw: str):
    try:
        if name == "kind":
            return Kind(raw)
        if name == "accept":
            if raw not in ("0", "1"):
                raise ValueError(raw)
            return raw == "1"
        if name == "direction":
            value = int(raw)
            if value not in (-1, 1):
                raise ValueError(raw)
            return value
        if name in _FLOATS:
            return float(raw)
        return raw
    except ValueError:
        raise DecodeError(name, f"invalid value {raw!r}") from None


DROPPED = None


@dataclass
class Delay:
    """A non-negative delay distribution (seconds); samples are clamped at 0."""

    family: str = "zero"
    mean: float = 0.0
    std: float = 0.0
    samples: tuple = ()
    clamped: int = field(default=0, compare=False)
    drawn: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.family not in ("zero", "constant", "normal", "exponential", "uniform", "empirical"):
            raise ValueError(f"unknown delay family {self.family!r}")
        if self.family == "empirical" and not self.samples:
            raise ValueError("empirical delay needs samples")

    def sample(self, rng: np.random.Generator) -> float:
        self.drawn += 1
        fam = self.family
        if fam == "zero":
            return 0.0
        if fam == "constant":
            value = self.mean
        elif fam == "normal":
            value = rng.normal(self.mean, self.std)
        elif fam == "exponential":
            value = rng.exponential(self.mean) if self.mean > 0 else 0.0
        elif fam == "uniform":
            value = rng.uniform(self.mean - self.std, self.mean + self.std)
        else:
            value = self.samples[int(rng.integers(len(self.samples)))]
        if value < 0:
            self.clamped += 1
            return 0.0
        return float(value)

    @classmethod
    def from_config(cls, cfg) -> "Delay":
        if cfg is None:
            return cls()
        if isinstance(cfg, (int, float)):
            return cls("constant", float(cfg))
        return cls(cfg.get("family", "constant"), float(cfg.get("mean", 0.0)),
                   float(cfg.get("std", 0.0)), tuple(cfg.get("samples", ())))


@dataclass
class ChannelModel:
    base_latency: Delay = field(default_factory=Delay)
    loss_probability: float = 0.0
    measurement_delay_probability: float = 0.0
    measurement_delay: Delay = field(default_factory=Delay)
    input_delay: Delay = field(default_factory=Delay)
    # the meter stream is one ordered connection: a held-back reading stalls it
    # and later readings queue behind it ("unordered" lets readings overtake)
    measurement_ordering: str = "unordered"
    _meter_clear_at: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        if self.measurement_ordering not in ("fifo", "unordered"):
            raise ValueError(f"unknown measurement ordering {self.measurement_ordering!r}")
        for p in (self.loss_probability, self.measurement_delay_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "ChannelModel":
        cfg = cfg or {}
        return cls(Delay.from_config(cfg.get("base_latency")),
                   float(cfg.get("loss_probability", 0.0)),
                   float(cfg.get("measurement_delay_probability", 0.0)),
                   Delay.from_config(cfg.get("measurement_delay")),
                   Delay.from_config(cfg.get("input_delay")),
                   cfg.get("measurement_ordering", "unordered"))

    @property
    def clamp_count(self) -> int:
        return self.base_latency.clamped + self.measurement_delay.clamped + self.input_delay.clamped

    def mean_round_trip(self) -> float:
        return 2.0 * max(self.base_latency.mean, 0.0) + max(self.input_delay.mean, 0.0)


def send(msg: PacketMessage, channel: ChannelModel, now: float, rng: np.random.Generator):
    """Schedule ``msg`` through ``channel``; returns ``(msg, deliver_at)`` or DROPPED.

    Device traffic gets base latency, plus input delay on responses. Demand
    measurements travel on their own logical channel and are delayed only when
    the measurement-delay gate fires.
    """
    if now < 0:
        raise ValueError("now must be non-negative")
    msg = msg.stamped(now)
    if channel.loss_probability > 0 and rng.random() < channel.loss_probability:
        return DROPPED
    if msg.kind is Kind.DEMAND_MEASUREMENT:
        if channel.measurement_ordering == "fifo" and now < channel._meter_clear_at:
            # queued behind a stalled reading; flushed together when it arrives
            return msg, channel._meter_clear_at
        delay = 0.0
        if channel.measurement_delay_probability > 0 and rng.random() < channel.measurement_delay_probability:
            delay = channel.measurement_delay.sample(rng)
        channel._meter_clear_at = now + delay
        return msg, now + delay
    delay = channel.base_latency.sample(rng)
    if msg.kind is Kind.RESPONSE:
        delay += channel.input_delay.sample(rng)
    return msg, now + delay
