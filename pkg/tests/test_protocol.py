import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemsim.protocol import (DROPPED, ChannelModel, DecodeError, Delay, Kind, PacketMessage, decode,
                             decode_stream, encode, send)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
nonces = st.text(st.characters(blacklist_characters="\n=", blacklist_categories=("Cs",)), max_size=24)

messages = st.one_of(
    st.builds(PacketMessage.request, st.sampled_from([-1, 1]), finite, finite, nonces,
              st.none() | finite),
    st.builds(PacketMessage.response, st.booleans(), nonces, st.none() | finite),
    st.builds(PacketMessage.opt_out, st.sampled_from([-1, 1]), finite, finite, nonces),
    st.builds(PacketMessage.release, st.sampled_from([-1, 1]), finite, nonces),
    st.builds(PacketMessage.measurement, finite, st.none() | finite),
)


@settings(max_examples=10_000, deadline=None)
@given(messages)
def test_round_trip(msg):
    assert decode(encode(msg)) == msg


@given(st.lists(messages, min_size=1, max_size=5))
def test_stream_of_records(msgs):
    data = b"".join(encode(m) for m in msgs)
    out = []
    while data:
        m, data = decode_stream(data)
        out.append(m)
    assert out == msgs


@given(st.binary(max_size=64))
def test_garbage_never_crashes(data):
    try:
        decode(data)
    except DecodeError:
        pass


def test_unknown_tags_are_ignored():
    body = b"k=RESPONSE\nacc=1\nn=abc\nfuture=42"
    msg = decode(str(len(body)).encode() + b"\n" + body)
    assert msg == PacketMessage.response(True, "abc")


@pytest.mark.parametrize("body, field", [
    (b"dir=1", "kind"),
    (b"k=NOPE", "kind"),
    (b"k=REQUEST\ndir=2", "direction"),
    (b"k=RESPONSE\nacc=yes", "accept"),
    (b"k=REQUEST\np=fast", "rated_power"),
])
def test_decode_errors_name_the_field(body, field):
    with pytest.raises(DecodeError) as err:
        decode(str(len(body)).encode() + b"\n" + body)
    assert err.value.field == field


def test_truncated_record():
    data = encode(PacketMessage.response(True, "n1"))
    with pytest.raises(DecodeError):
        decode(data[:-2])


def test_messages_carry_no_identity():
    names = set(PacketMessage.__dataclass_fields__)
    assert not names & {"device_id", "id", "address", "owner"}


def test_measurement_gate_statistics():
    ch = ChannelModel(measurement_delay_probability=0.1,
                      measurement_delay=Delay("normal", 20.0, 2.0))
    rng = np.random.default_rng(7)
    delays = []
    for i in range(100_000):
        _, at = send(PacketMessage.measurement(1.0), ch, float(i), rng)
        delays.append(at - i)
    delays = np.array(delays)
    held = delays[delays > 0]
    assert 9_500 <= len(held) <= 10_500
    assert 19.8 <= held.mean() <= 20.2


def test_fifo_readings_queue_behind_a_stall():
    ch = ChannelModel(measurement_delay_probability=1.0, measurement_delay=Delay("constant", 5.0),
                      measurement_ordering="fifo")
    rng = np.random.default_rng(0)
    arrivals = [send(PacketMessage.measurement(t), ch, float(t), rng)[1] for t in range(8)]
    # t=0 stalls until 5; t=1..4 queue behind it; t=5 draws the gate again
    assert arrivals[:5] == [5.0] * 5
    assert arrivals[5] == 10.0
    assert arrivals == sorted(arrivals)


def test_unordered_readings_can_overtake():
    ch = ChannelModel(measurement_delay_probability=0.5, measurement_delay=Delay("constant", 5.0))
    rng = np.random.default_rng(1)
    arrivals = [send(PacketMessage.measurement(t), ch, float(t), rng)[1] for t in range(50)]
    assert arrivals != sorted(arrivals)


def test_loss_and_latency():
    rng = np.random.default_rng(3)
    lossy = ChannelModel(loss_probability=1.0)
    assert send(PacketMessage.response(True, "a"), lossy, 0.0, rng) is DROPPED
    ch = ChannelModel(base_latency=Delay("constant", 0.05), input_delay=Delay("constant", 0.008))
    _, at = send(PacketMessage.response(True, "a"), ch, 1.0, rng)
    assert at == pytest.approx(1.058)
    msg, at = send(PacketMessage.request(1, 4.5, 240, "b"), ch, 1.0, rng)
    assert at == pytest.approx(1.05) and msg.timestamp_sent == 1.0


def test_negative_delay_is_clamped():
    d = Delay("normal", -5.0, 0.1)
    rng = np.random.default_rng(0)
    assert d.sample(rng) == 0.0 and d.clamped == 1


def test_channel_validation():
    with pytest.raises(ValueError):
        ChannelModel(loss_probability=1.5)
    with pytest.raises(ValueError):
        ChannelModel(measurement_ordering="lifo")
    with pytest.raises(ValueError):
        send(PacketMessage.measurement(1.0), ChannelModel(), -1.0, np.random.default_rng())
