import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemsim.coordinator import Coordinator, CoordinatorConfig, FeedbackPolicy, decide
from pemsim.protocol import Kind, PacketMessage


def _req(direction=1, power=4.5, length=240.0, nonce="n0"):
    return PacketMessage.request(direction, power, length, nonce)


def test_zero_error_accepts_nothing():
    c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED"), reference=0.0)
    assert not c.handle_request(_req(1, nonce="a"), 0.0).accept
    assert not c.handle_request(_req(-1, 5.0, nonce="b"), 0.0).accept


def test_accept_starts_timer_and_expiry_removes_it():
    c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED"), reference=10.0)
    resp = c.handle_request(_req(nonce="a"), 0.0)
    assert resp.accept and resp.correlation_nonce == "a"
    assert c.estimate == 4.5 and c.active_timers == 1
    c.advance(239.9)
    assert c.estimate == 4.5
    c.advance(240.0)
    assert c.estimate == 0.0 and c.active_timers == 0
    rep = c.report_measurements(300.0)
    assert rep.n_req_c == 1 and rep.n_acc_c == 1 and rep.n_expired_c == 1


def test_sequential_decisions_do_not_overshoot():
    c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED", threshold_charge=2.25), reference=10.0)
    accepted = sum(c.handle_request(_req(nonce=f"n{i}"), 0.0).accept for i in range(10))
    assert accepted == 2  # 0 -> 4.5 -> 9.0, then the error 1.0 is below the threshold


def test_literal_rule_differs_from_strict():
    strict = CoordinatorConfig()
    literal = CoordinatorConfig(rule="literal")
    assert not decide(0.0, 1, 4.5, strict) and decide(0.0, 1, 4.5, literal)
    assert decide(-1.0, -1, 5.0, strict) and decide(-1.0, -1, 5.0, literal)
    assert decide(-10.0, -1, 5.0, strict) and not decide(-10.0, -1, 5.0, literal)
    with pytest.raises(ValueError):
        CoordinatorConfig(rule="fuzzy")


def test_malformed_requests_are_rejected():
    c = Coordinator(reference=100.0)
    bad = [PacketMessage(Kind.REQUEST, 1, None, 240.0, correlation_nonce="x"),
           _req(length=-1, nonce="y"), _req(power=0.0, nonce="z")]
    for msg in bad:
        assert c.handle_request(msg, 0.0).accept is False
    assert c.malformed == 3 and c.active_timers == 0


def test_release_and_early_stop_cancel_timers():
    c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED"), reference=20.0)
    c.handle_request(_req(nonce="a"), 0.0)
    c.handle_request(_req(nonce="b"), 0.0)
    c.handle(PacketMessage.release(1, 4.5, "a"), 1.0)
    c.handle(PacketMessage.opt_out(1, 4.5, 0.0, "b"), 2.0)
    assert c.estimate == 0.0 and c.active_timers == 0
    c.handle(PacketMessage.release(1, 4.5, "zzz"), 3.0)
    assert c.unknown_cancels == 1


def test_forced_packet_notice_runs_a_timer():
    c = Coordinator(reference=0.0)
    c.handle(PacketMessage.opt_out(1, 4.5, 240.0, "f"), 0.0)
    assert c.estimate == 4.5
    c.advance(240.0)
    assert c.estimate == 0.0


def test_feedback_policies():
    for policy, expected in [("MEASURED", 7.0), ("RECONSTRUCTED", 4.5), ("BLEND", 7.0)]:
        c = Coordinator(CoordinatorConfig(policy=policy), reference=100.0)
        c.handle_request(_req(nonce="a"), 0.0)
        c.handle(PacketMessage.measurement(7.0, sent=0.5), 1.0)
        assert c.feedback(1.0) == pytest.approx(expected)


def test_blend_anchors_at_send_time():
    c = Coordinator(CoordinatorConfig(policy="BLEND"), reference=100.0)
    c.handle_request(_req(nonce="a"), 0.0)
    c.handle_request(_req(nonce="b"), 10.0)
    # the reading was taken at t=5 when only packet "a" ran, and shows 1 kW of base load
    c.handle(PacketMessage.measurement(5.5, sent=5.0), 12.0)
    assert c.offset == pytest.approx(1.0)
    assert c.feedback(12.0) == pytest.approx(10.0)


requests = st.lists(st.tuples(st.sampled_from([-1, 1]), st.sampled_from([4.0, 4.5, 5.0]),
                              st.floats(60, 600)), min_size=1, max_size=40)


@settings(max_examples=200, deadline=None)
@given(requests, st.floats(-50, 50), st.randoms())
def test_decisions_ignore_identity(reqs, reference, rnd):
    """Relabelling nonces and reordering identical requests changes no decision."""
    def run(labels):
        c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED", threshold_charge=1.0), reference=reference)
        return [c.handle_request(_req(d, p, l, labels[i]), float(i)).accept
                for i, (d, p, l) in enumerate(reqs)]

    base = run([f"dev{i}" for i in range(len(reqs))])
    shuffled = [f"other{i}" for i in range(len(reqs))]
    rnd.shuffle(shuffled)
    assert run(shuffled) == base


def test_report_counts_and_proportions():
    c = Coordinator(CoordinatorConfig(policy="RECONSTRUCTED"), reference=4.0)
    c.handle_request(_req(nonce="a"), 0.0)
    c.handle_request(_req(nonce="b"), 0.0)
    rep = c.report_measurements(60.0)
    assert (rep.n_req_c, rep.n_acc_c) == (2, 1)
    assert rep.beta_c == 0.5 and rep.beta_d is None
    rep2 = c.report_measurements(300.0)
    assert rep2.active_c_start == 1 and rep2.expire_c == 1.0


def test_policy_enum_accepts_strings():
    assert CoordinatorConfig(policy="MEASURED").policy is FeedbackPolicy.MEASURED
