"""Smoke test for the pylatctl extension.

Build and run:
    cargo build --release -p pylatctl --features extension-module
    cp target/release/libpylatctl.so python/pylatctl.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pylatctl as lc


def main():
    s = lc.ensemble_stats([0.1, 0.2, 0.3])
    assert s.mean == 0.2 and abs(s.std - 0.1) < 1e-16 and s.odd_count == 0, s
    s = lc.ensemble_stats([0.0] * 99 + [1.0])
    assert s.odd_count == 1 and abs(s.cov - 0.1 / 0.02) < 1e-12, s

    track = lc.Track.load("train-a")
    assert track.half_width == 7.5 and track.length > 6000
    s_, d = track.project(*track.centerline()[10])
    assert abs(d) < 1e-9

    expert = lc.drive_expert(track)
    assert expert.terminal == "lap_complete", expert
    assert expert.max_abs_d < 0.6 * track.half_width

    data = lc.collect(track, laps=1)
    assert len(data) > 10000 and data.beam_count == 19
    assert len(data.scans()[0]) == 19 and len(data.targets()) == len(data)
    train, hold = data.split(0.8, 1)
    assert len(train) + len(hold) == len(data)

    forest = lc.Forest.fit(train, n_trees=20, seed=3)
    scan = hold.scans()[0]
    outs = forest.tree_outputs(scan)
    st = forest.predict_with_stats(scan)
    assert len(outs) == forest.n_trees == 20
    assert math.isclose(st.mean, sum(outs) / len(outs), rel_tol=1e-12, abs_tol=1e-15)
    assert forest.predict(scan) == st.mean

    cov_on, cov_off = forest.calibrate(hold)
    assert 0 < cov_off < cov_on

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "forest.json")
        forest.save(path)
        again = lc.Forest.load(path)
        assert again.tree_outputs(scan) == outs

    sup = lc.Supervisor(0.5, 0.3, min_fallback_steps=2)
    assert sup.step([0.1] * 20) == "learned"
    assert sup.step([0.0, 1.0] * 10) == "fallback_pid"
    assert sup.step([0.1] * 20, human=True) == "human_override"
    assert sup.interventions == 1

    mlp = lc.Mlp.fit(train.subsample(500, 1), hidden=[16, 8], max_epochs=20)
    assert math.isfinite(mlp.predict(scan))

    cfg = lc.default_config()
    assert "budgets" in cfg
    try:
        lc.Track.load("no-such-track")
    except (ValueError, OSError):
        pass
    else:
        raise AssertionError("unknown track accepted")

    print("smoke ok:", json.dumps({"expert_max_d": expert.max_abs_d, "samples": len(data), "cov_on": cov_on}))


if __name__ == "__main__":
    main()
