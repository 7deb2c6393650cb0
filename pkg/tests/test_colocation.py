import math
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from navhop.colocation import (
    DEFAULT_RADIUS,
    EARTH_RADIUS_KM,
    PUBLISH_APP,
    SEQ_APP,
    InstrumentGranule,
    MatchProduct,
    build_publish_variant,
    ecef_array,
    gen_granules,
    match,
    submit_job,
    to_ecef,
)
from navhop.runtime import AppRegistry, Completed, StageMachine, Stage, checkpoint, start_fresh
from oracles import ecef as oracle_ecef, same_match

FIXTURES = Path(__file__).parent / "fixtures"


def assert_same_as_oracle(product, fine, coarse, radius):
    ok, why = same_match(product, fine, coarse, radius)
    assert ok, why


# ---------------------------------------------------------------- ECEF


def test_ecef_axis_and_pole():
    assert to_ecef(0.0, 0.0) == pytest.approx((6371.0, 0.0, 0.0), abs=1e-9)
    for lon in (-179.0, 0.0, 37.5, 180.0):
        assert to_ecef(90.0, lon) == pytest.approx((0.0, 0.0, 6371.0), abs=1e-9)


def test_ecef_45_45():
    h = math.sqrt(2) / 2
    assert to_ecef(45.0, 45.0) == pytest.approx((6371 * 0.5, 6371 * 0.5, 6371 * h), rel=1e-12)


@given(st.floats(-90, 90), st.floats(-180, 180).filter(lambda x: x > -180))
def test_ecef_on_sphere_and_matches_oracle(lat, lon):
    v = to_ecef(lat, lon)
    assert math.hypot(*v) == pytest.approx(EARTH_RADIUS_KM, rel=1e-9)
    assert v == pytest.approx(oracle_ecef(lat, lon), rel=1e-12, abs=1e-9)
    assert ecef_array(np.array([lat]), np.array([lon]))[0] == pytest.approx(v, rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("lat,lon", [(91, 0), (-90.5, 0), (0, -180), (0, 181)])
def test_ecef_range(lat, lon):
    with pytest.raises(ValueError):
        to_ecef(lat, lon)


# ---------------------------------------------------------------- matching


def test_coincident_point_distance_zero():
    v = np.array([to_ecef(10.0, 20.0)])
    p = match(v, v, 0.01)
    assert p.pairs == [(0, 0, 0.0)] and p.unmatched_fine == []


def test_antipodal_unmatched():
    p = match(np.array([to_ecef(10.0, 20.0)]), np.array([to_ecef(-10.0, -160.0)]), math.pi / 4)
    assert p.pairs == [] and p.unmatched_fine == [0]


def test_tie_goes_to_lowest_coarse_index():
    fine = np.array([to_ecef(0.0, 0.0)])
    coarse = np.array([to_ecef(0.0, 1.0), to_ecef(0.0, -1.0), to_ecef(1.0, 0.0)])
    p = match(fine, coarse, 0.1)
    assert p.pairs[0][0] == 0


def test_radius_must_be_positive():
    with pytest.raises(ValueError):
        match(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


def random_instance(rng, n, m, box=20.0):
    def pts(k):
        return ecef_array(np.array([rng.uniform(-box, box) for _ in range(k)]),
                          np.array([rng.uniform(-box, box) for _ in range(k)]))
    return pts(n), pts(m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 40), st.floats(0.001, 0.5))
def test_match_equals_oracle_property(seed, n, m, radius):
    fine, coarse = random_instance(random.Random(seed), n, m)
    assert_same_as_oracle(match(fine, coarse, radius), fine, coarse, radius)


def test_match_chunking_is_invisible():
    fine, coarse = random_instance(random.Random(3), 200, 30)
    assert match(fine, coarse, 0.05, chunk=7) == match(fine, coarse, 0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-150.0, 150.0))
def test_longitude_rotation_preserves_pairs(seed, shift):
    rng = random.Random(seed)
    lat_f = [rng.uniform(-20, 20) for _ in range(40)]
    lon_f = [rng.uniform(-20, 20) for _ in range(40)]
    lat_c = [rng.uniform(-20, 20) for _ in range(12)]
    lon_c = [rng.uniform(-20, 20) for _ in range(12)]

    def run(d):
        f = ecef_array(np.array(lat_f), np.array(lon_f) + d)
        c = ecef_array(np.array(lat_c), np.array(lon_c) + d)
        return match(f, c, 0.04)

    a, b = run(0.0), run(shift)
    # a rotation can move a distance by a few ulps, so skip instances sitting on the radius edge
    assume(not any(abs(d - 0.04) < 1e-12 for _, _, d in a.pairs))
    assert [(c, f) for c, f, _ in a.pairs] == [(c, f) for c, f, _ in b.pairs]
    assert a.unmatched_fine == b.unmatched_fine


def test_product_invariants_on_fixture():
    fine, coarse = gen_granules(7, 100, 20)
    fv = ecef_array(*fine.columns()[:2])
    cv = ecef_array(*coarse.columns()[:2])
    p = match(fv, cv, DEFAULT_RADIUS)
    seen = [f for _, f, _ in p.pairs] + p.unmatched_fine
    assert sorted(seen) == list(range(100)) and len(set(seen)) == 100
    assert all(d <= DEFAULT_RADIUS for _, _, d in p.pairs)
    assert p.pairs and p.unmatched_fine  # the fixture exercises both outcomes
    assert_same_as_oracle(p, fv, cv, DEFAULT_RADIUS)


def test_product_vars_roundtrip():
    fine, coarse = random_instance(random.Random(5), 30, 8)
    p = match(fine, coarse, 0.1)
    assert MatchProduct.from_vars(p.to_vars()) == p


# ---------------------------------------------------------------- granules


def test_gen_granules_deterministic():
    a = gen_granules(11, 10, 4)
    b = gen_granules(11, 10, 4)
    assert a[0].to_text() == b[0].to_text() and a[1].to_text() == b[1].to_text()
    assert gen_granules(12, 10, 4)[0].to_text() != a[0].to_text()


def test_seed7_golden_fixture():
    fine, coarse = gen_granules(7, 100, 20)
    assert fine.to_text() == (FIXTURES / "seed7_fine.txt").read_bytes()
    assert coarse.to_text() == (FIXTURES / "seed7_coarse.txt").read_bytes()


def test_granule_text_roundtrip():
    fine, _ = gen_granules(7, 100, 20)
    assert InstrumentGranule.from_text(fine.to_text()) == fine


@pytest.mark.parametrize("n_fine,n_coarse", [(0, 5), (5, 0)])
def test_gen_granules_needs_samples(n_fine, n_coarse):
    with pytest.raises(ValueError):
        gen_granules(7, n_fine, n_coarse)


def test_granule_validation():
    with pytest.raises(ValueError):
        InstrumentGranule("fine", "g", ())
    with pytest.raises(ValueError):
        InstrumentGranule("fine", "g", ((95.0, 0.0, 1.0),))
    with pytest.raises(ValueError):
        InstrumentGranule("medium", "g", ((0.0, 0.0, 1.0),))
    with pytest.raises(ValueError):
        InstrumentGranule.from_text(b"granule g\ninstrument fine\nsamples 2\n0 0 0\n")


# ---------------------------------------------------------------- stage machines


def run_app(make_env, store, sched, registry, app, job="1"):
    submit_job(store, sched, job, app)
    out = start_fresh(job, app, make_env())
    assert isinstance(out, Completed)
    return store.get(registry.jobs[job].product_keys[0])


def test_sequential_product_matches_golden(make_env, store, sched, registry):
    assert run_app(make_env, store, sched, registry, SEQ_APP) == (FIXTURES / "seed7_match.txt").read_bytes()


def test_publish_variant_scheduler_trace(make_env, store, sched, registry, log):
    prod = run_app(make_env, store, sched, registry, PUBLISH_APP)
    assert prod == (FIXTURES / "seed7_match.txt").read_bytes()
    kinds = [(e["kind"], e.get("seq")) for e in log if e["kind"] in ("ckpt_published", "finished_published")]
    assert kinds == [("ckpt_published", 1), ("ckpt_published", 2), ("finished_published", None)]
    ckpt_stages = [e["stage"] for e in log if e["kind"] == "ckpt_promoted"]
    assert ckpt_stages == [3, 6]


def test_variants_have_expected_shape():
    labels = build_publish_variant().labels()
    assert len(labels) == 9 and labels.count("publish ckpt") == 2 and labels[-1] == "publish finished"


def test_checkpoint_size_locality(make_env, store, sched, registry, log):
    """The early checkpoint (inputs only) is smaller than one taken with derived arrays live."""
    base = build_publish_variant()
    forced = {}

    def match_then_force(state, env):
        base[6].step(state, env)
        snap = state.copy()
        snap.job_id = "1-forced"
        checkpoint(snap, env, reason="forced")
        forced["bytes"] = [e for e in log if e["kind"] == "ckpt_cmi_uploaded"][-1]["bytes"]

    stages = [Stage(s.index, s.label, match_then_force if s.index == 6 else s.step) for s in base.stages]
    env = make_env(apps=AppRegistry([StageMachine(PUBLISH_APP, stages)]))
    submit_job(store, sched, "1", PUBLISH_APP)
    assert isinstance(start_fresh("1", PUBLISH_APP, env), Completed)
    early = [e["bytes"] for e in log if e["kind"] == "ckpt_cmi_uploaded" and e["job"] == "1"][0]
    assert early < forced["bytes"]
