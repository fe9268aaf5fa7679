import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdrive.sim import (ACCEL_LIMIT, EGO_ROUTE, EpisodeDoneError, IDM_ACCEL_MAX,
                            IDM_BRAKE_COMFORT, IDM_EXPONENT, IDM_HEADWAY, IDM_MIN_GAP,
                            IntersectionEnv, MetaAction, PlacementError, Route,
                            ScenarioConfig, SimConfigError, VehicleState, build_route,
                            hv_policy, rectangles_overlap)


def make_env(**kw):
    return IntersectionEnv(ScenarioConfig(**kw))


def test_config_validation():
    with pytest.raises(SimConfigError):
        ScenarioConfig(sim_frequency_hz=15, policy_frequency_hz=4).validate()
    with pytest.raises(SimConfigError):
        ScenarioConfig(spawn_probability=1.5).validate()
    with pytest.raises(SimConfigError):
        ScenarioConfig(duration_s=0).validate()
    with pytest.raises(SimConfigError):
        ScenarioConfig(target_speeds=(9.0, 4.5)).validate()
    ScenarioConfig().validate()


def test_reset_same_seed_bit_identical():
    cfg = dict(seed=7, initial_vehicle_count=1)
    s1, _ = make_env(**cfg).reset()
    s2, _ = make_env(**cfg).reset()
    assert s1.fingerprint() == s2.fingerprint()


def test_reset_vehicle_counts():
    state, _ = make_env(seed=3, initial_vehicle_count=5).reset()
    assert len(state.vehicles) == 6
    assert state.vehicles[0].is_ego
    state, _ = make_env(seed=3, initial_vehicle_count=0).reset()
    assert len(state.vehicles) == 1


def test_empty_traffic_first_step_cannot_collide():
    env = make_env(seed=1, initial_vehicle_count=0, spawn_probability=0.0)
    env.reset()
    _, outcome = env.step(MetaAction.FASTER)
    assert not outcome.collided


def test_idle_keeps_speed_and_advances_arc_length():
    env = make_env(seed=2, initial_vehicle_count=0, spawn_probability=0.0)
    state, _ = env.reset()
    state.ego_level = len(state.config.target_speeds) - 1
    state.ego.speed = 9.0
    state.ego.target_speed = 9.0
    s_before = state.ego.s
    _, outcome = env.step(MetaAction.IDLE)
    assert outcome.ego_speed == pytest.approx(9.0, abs=1e-9)
    assert state.ego.s - s_before == pytest.approx(9.0, abs=1e-9)


def test_overlapping_vehicles_collide_on_first_tick():
    env = make_env(seed=5, initial_vehicle_count=0, spawn_probability=0.0)
    state, _ = env.reset()
    # ego exit lane and the east-straight exit share the y = 2 westbound lane
    state.ego.s = EGO_ROUTE.s_exit + 4.0
    state.ego.speed = 0.0
    state.ego.sync_pose()
    hv_route = build_route("east", "straight")
    hv = VehicleState(vid=1, route=hv_route, s=hv_route.s_exit + 4.0,
                      speed=0.0, target_speed=0.0)
    assert (hv.x, hv.y) == pytest.approx((state.ego.x, state.ego.y))
    state.vehicles.append(hv)
    _, outcome = env.step(MetaAction.SLOWER)
    assert outcome.collided and not outcome.arrived


def test_truncation_at_duration():
    env = make_env(seed=4, initial_vehicle_count=0, spawn_probability=0.0,
                   duration_s=30.0)
    state, _ = env.reset()
    outcome = None
    while not state.done:
        state, outcome = env.step(MetaAction.SLOWER)
    assert outcome.truncated and not outcome.collided and not outcome.arrived
    assert outcome.sim_time >= 30.0
    assert state.steps == 30


def test_step_after_terminal_raises():
    env = make_env(seed=4, initial_vehicle_count=0, spawn_probability=0.0)
    state, _ = env.reset()
    while not state.done:
        state, _ = env.step(MetaAction.FASTER)
    with pytest.raises(EpisodeDoneError):
        env.step(MetaAction.IDLE)


def idm_reference(v, v0, gap, leader_speed):
    """Closed-form IDM with the simulator's constants, clamped the same way."""
    term = 1.0 - (v / v0) ** IDM_EXPONENT
    if gap is not None:
        s_star = IDM_MIN_GAP + max(
            0.0, v * IDM_HEADWAY
            + v * (v - leader_speed) / (2 * math.sqrt(IDM_ACCEL_MAX * IDM_BRAKE_COMFORT)))
        term -= (s_star / gap) ** 2
    return min(max(IDM_ACCEL_MAX * term, -ACCEL_LIMIT), IDM_ACCEL_MAX)


class _FakeState:
    def __init__(self, vehicles):
        self.vehicles = vehicles


def _hv(route, s, speed, target):
    return VehicleState(vid=9, route=route, s=s, speed=speed, target_speed=target)


def test_hv_policy_free_road_accelerates():
    route = build_route("east", "straight")
    veh = _hv(route, 0.0, 5.0, 8.0)
    a = hv_policy(veh, _FakeState([veh]))
    assert a > 0
    assert a == pytest.approx(idm_reference(5.0, 8.0, None, None))


def test_hv_policy_equilibrium():
    route = build_route("east", "straight")
    veh = _hv(route, 0.0, 8.0, 8.0)
    assert abs(hv_policy(veh, _FakeState([veh]))) < 1e-6


def test_hv_policy_stopped_leader_at_min_gap_brakes_hard():
    route = build_route("east", "straight")
    follower = _hv(route, 0.0, 8.0, 8.0)
    leader = _hv(route, follower.length + IDM_MIN_GAP, 0.0, 0.0)
    a = hv_policy(follower, _FakeState([follower, leader]))
    assert a <= -IDM_BRAKE_COMFORT
    assert a == pytest.approx(idm_reference(8.0, 8.0, IDM_MIN_GAP, 0.0))


def test_hv_policy_rejects_ego():
    env = make_env(seed=0, initial_vehicle_count=0)
    state, _ = env.reset()
    with pytest.raises(ValueError):
        hv_policy(state.ego, state)


def _run_fingerprints(seed, actions, nhv=3):
    env = make_env(seed=seed, initial_vehicle_count=nhv)
    state, _ = env.reset()
    prints = [state.fingerprint()]
    outcomes = []
    for a in actions:
        if state.done:
            break
        state, out = env.step(a)
        prints.append(state.fingerprint())
        outcomes.append(out)
    return prints, outcomes


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       actions=st.lists(st.integers(0, 2), min_size=1, max_size=12))
def test_determinism_under_any_action_sequence(seed, actions):
    p1, o1 = _run_fingerprints(seed, actions)
    p2, o2 = _run_fingerprints(seed, actions)
    assert p1 == p2
    assert o1 == o2


def test_exactly_one_terminal_flag_at_episode_end():
    rng = np.random.default_rng(42)
    for seed in range(12):
        env = make_env(seed=seed, initial_vehicle_count=4)
        state, _ = env.reset()
        flags_seen = []
        while not state.done:
            state, out = env.step(int(rng.integers(3)))
            flags_seen.append((out.collided, out.arrived, out.truncated))
        *before, final = flags_seen
        assert sum(final) == 1
        assert all(sum(f) == 0 for f in before)


def test_kinematic_bounds_per_tick():
    # policy frequency == sim frequency makes one decision step == one tick
    env = make_env(seed=8, initial_vehicle_count=5, sim_frequency_hz=15,
                   policy_frequency_hz=15)
    state, _ = env.reset()
    dt = 1.0 / 15
    v_cap = 10.5  # HV spawn cap 10 plus one tick of IDM overshoot
    speeds = {v.vid: v.speed for v in state.vehicles}
    arcs = {v.vid: v.s for v in state.vehicles}
    rng = np.random.default_rng(0)
    for _ in range(450):
        if state.done:
            break
        state, _ = env.step(int(rng.integers(3)))
        for v in state.vehicles:
            if v.vid in speeds:
                assert abs(v.speed - speeds[v.vid]) <= ACCEL_LIMIT * dt + 1e-9
                assert v.s - arcs[v.vid] <= v_cap * dt + 1e-9
            speeds[v.vid] = v.speed
            arcs[v.vid] = v.s


def test_spawn_rate_within_binomial_bounds():
    attempts = successes = 0
    env = make_env(seed=11, initial_vehicle_count=0, spawn_probability=0.2)
    state, _ = env.reset()
    while attempts + state.spawn_attempts < 10_000:
        if state.done:
            attempts += state.spawn_attempts
            successes += state.spawn_successes
            state, _ = env.reset()
        state, _ = env.step(MetaAction.IDLE)
    attempts += state.spawn_attempts
    successes += state.spawn_successes
    rate = successes / attempts
    assert 0.18 <= rate <= 0.22


def _point_to_polyline_distance(p, points):
    best = math.inf
    px, py = p
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        t = 0.0 if seg2 == 0 else max(0.0, min(1.0, ((px - x0) * dx + (py - y0) * dy) / seg2))
        qx, qy = x0 + t * dx, y0 + t * dy
        best = min(best, math.hypot(px - qx, py - qy))
    return best


def test_route_adherence_whole_episode():
    env = make_env(seed=21, initial_vehicle_count=4)
    state, _ = env.reset()
    rng = np.random.default_rng(1)
    while not state.done:
        state, _ = env.step(int(rng.integers(3)))
        for v in state.vehicles:
            assert _point_to_polyline_distance((v.x, v.y), v.route.points) < 1e-6


def test_route_geometry_continuity():
    for approach in ("north", "east", "west"):
        for movement in ("straight", "left", "right"):
            r = build_route(approach, movement)
            # consecutive samples along s map to nearby points
            prev = r.position(0.0)
            for s in np.linspace(0, r.length, 200)[1:]:
                cur = r.position(float(s))
                assert math.hypot(cur[0] - prev[0], cur[1] - prev[1]) < 1.0
                prev = cur
            assert 0.0 < r.s_enter < r.s_exit < r.length


def test_ego_route_shape():
    # south approach, left turn, west exit
    x0, y0 = EGO_ROUTE.position(0.0)
    assert x0 == pytest.approx(2.0) and y0 < -6.0
    xe, ye = EGO_ROUTE.position(EGO_ROUTE.length)
    assert ye == pytest.approx(2.0) and xe < -6.0


def test_rectangle_overlap_matches_point_sampling():
    rng = np.random.default_rng(3)
    for _ in range(60):
        ax, ay, bx, by = rng.uniform(-4, 4, size=4)
        ah, bh = rng.uniform(0, 2 * math.pi, size=2)
        got = rectangles_overlap(ax, ay, ah, 5.0, 2.0, bx, by, bh, 5.0, 2.0)
        # dense point sampling of rectangle b tested against rectangle a
        hit = False
        ca, sa = math.cos(ah), math.sin(ah)
        cb, sb = math.cos(bh), math.sin(bh)
        for u in np.linspace(-2.49, 2.49, 25):
            for w in np.linspace(-0.99, 0.99, 11):
                px = bx + u * cb - w * sb
                py = by + u * sb + w * cb
                lx = (px - ax) * ca + (py - ay) * sa
                ly = -(px - ax) * sa + (py - ay) * ca
                if abs(lx) <= 2.5 and abs(ly) <= 1.0:
                    hit = True
                    break
            if hit:
                break
        if hit:
            assert got  # sampled interior intersection implies SAT overlap
