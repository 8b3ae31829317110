import pytest

from pemsim.scheduler import Priority, Scheduler


def test_equal_times_run_in_priority_then_insertion_order():
    s = Scheduler()
    log = []
    s.at(1.0, Priority.RECORDER, lambda t: log.append("rec"))
    s.at(1.0, Priority.COORDINATOR, lambda t: log.append("coord1"))
    s.at(1.0, Priority.GRID, lambda t: log.append("grid"))
    s.at(1.0, Priority.COORDINATOR, lambda t: log.append("coord2"))
    s.at(0.5, Priority.RECORDER, lambda t: log.append("early"))
    s.run(2.0)
    assert log == ["early", "grid", "coord1", "coord2", "rec"]
    assert s.now == 2.0


def test_every_and_until():
    s = Scheduler()
    times = []
    s.every(0.5, Priority.DEVICES, times.append, start=1.0, until=2.0)
    s.run(10.0)
    assert times == [1.0, 1.5, 2.0]


def test_past_events_run_now():
    s = Scheduler()
    s.run(5.0)
    seen = []
    s.at(1.0, Priority.GRID, seen.append)
    s.run(5.0)
    assert seen == [5.0]


def test_pacing_uses_injected_clock():
    clock = [0.0]
    slept = []

    def sleep(d):
        slept.append(d)
        clock[0] += d

    s = Scheduler("VIRTUAL", speedup=10.0, wall_clock=lambda: clock[0], sleep=sleep)
    s.every(1.0, Priority.GRID, lambda t: None, start=1.0, until=5.0)
    s.run(5.0)
    assert sum(slept) == pytest.approx(0.5)


def test_real_time_forces_unit_speed():
    assert Scheduler("REAL_TIME").speedup == 1.0
    with pytest.raises(ValueError):
        Scheduler("VIRTUAL", speedup=0.5)
