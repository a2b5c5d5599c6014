"""Smoke test for the oneaudit extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/oneaudit-*.whl
"""

import tempfile
from fractions import Fraction

import oneaudit


def alice_bob_vote(container, position):
    precinct = int(container.removeprefix("precinct-"))
    lead, trail = ("Alice", "Bob") if precinct <= 5 else ("Bob", "Alice")
    if position <= 900:
        return lead
    if position <= 1000:
        return trail
    return None


def main():
    # overstatement assorter endpoints for u=1, v=1/20
    assert oneaudit.overstatement_value(1, "1/20", 0, 1) == 0
    assert oneaudit.overstatement_value(1, "1/20", 1, 0) == Fraction(40, 39)
    assert oneaudit.overstatement_value(1, Fraction(1, 20), 1, 1) == Fraction(20, 39)

    with tempfile.TemporaryDirectory() as data:
        oneaudit.write_example(data)
        report = oneaudit.verify(data)
        assert report["passed"], report

        session = oneaudit.Session(data, "20230319")
        assert session.status == "RUNNING"

        try:
            session.record(1, "Alice")
        except oneaudit.AuditError as e:
            assert e.args[0] == "WRONG_STATE", e.args
        else:
            raise AssertionError("record before draw should fail")

        while session.status == "RUNNING":
            d = session.draw()
            if d["cvr"] is not None:
                session.record_card(d["ordinal"], d["cvr"])
            else:
                session.record(d["ordinal"], alice_bob_vote(d["container_id"], d["position"]))

        summary = session.summary()
        assert summary["status"] == "CONFIRMED", summary
        risk = float(summary["assertions"][0]["measured_risk"])
        assert risk <= 0.05, risk

        again = oneaudit.replay(session.transcript())
        assert again.transcript() == session.transcript()
        print(f"audit confirmed after {summary['draws']} draws, measured risk {risk:.4f}")

    sim = oneaudit.simulate("one-clca", reps=100, seed=3)
    assert 500 < sim["stats"]["mean"] < 1200, sim
    print(f"ONE CLCA expected sample size ~{sim['stats']['mean']:.0f} cards")
    print("smoke test passed")


if __name__ == "__main__":
    main()
