import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionctl import denoiser as dn
from motionctl import dmc
from motionctl import numcore as nc
from motionctl.diffusion import build_schedule, sample
from motionctl.errors import ConfigError, ContractError, InputError, NumericError, StorageError


# -- trajectories and boxes -----------------------------------------------

def test_interpolation_examples():
    pts = dmc.interpolate_trajectory([(1, 0, 0), (5, 8, 0)], 5)
    np.testing.assert_array_equal(pts[:, 0], [0, 2, 4, 6, 8])
    np.testing.assert_array_equal(dmc.interpolate_trajectory([(3, 7, 7)], 6), np.full((6, 2), 7.0))
    dense = [(i, 3 * i, 40 - i) for i in range(1, 9)]
    np.testing.assert_array_equal(dmc.interpolate_trajectory(dense, 8), np.array(dense)[:, 1:])
    with pytest.raises(InputError):
        dmc.interpolate_trajectory([(2, 0, 0), (2, 1, 1)], 4)


def test_trajectory_validation():
    with pytest.raises(InputError):
        dmc.Trajectory([], 8, 64, 64).validate()
    with pytest.raises(InputError):
        dmc.Trajectory([(3, 1, 1), (2, 1, 1)], 8, 64, 64).validate()
    with pytest.raises(InputError):
        dmc.Trajectory([(1, 64, 1)], 8, 64, 64).validate()
    assert dmc.Trajectory([(1, 10, 10), (8, 50, 10)], 8, 64, 64).points().shape == (8, 2)


def test_box_example_from_inclusion_rule():
    track = dmc.expand_to_boxes([(16, 16)], 8, 8, 64, 64, 4)
    np.testing.assert_array_equal(track.boxes[0], [8, 8, 24, 24])
    rows, cols = np.nonzero(track.masks[0])
    assert set(rows) == set(cols) == {2, 3, 4, 5}
    assert track.masks[0].sum() == 16


def test_box_clamps_at_border_and_saturates():
    track = dmc.expand_to_boxes([(0, 0)], 4, 4, 64, 64, 4)
    np.testing.assert_array_equal(track.boxes[0], [0, 0, 4, 4])
    assert track.masks[0].sum() >= 1
    assert dmc.expand_to_boxes([(30, 30)], 100, 100, 64, 64, 4).masks.all()
    with pytest.raises(InputError):
        dmc.expand_to_boxes([(70, 3)], 4, 4, 64, 64, 4)
    with pytest.raises(InputError):
        dmc.expand_to_boxes([(7, 3)], 0, 4, 64, 64, 4)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 63.9), st.floats(0, 63.9), st.floats(0.5, 40), st.floats(0.5, 40), st.sampled_from([1, 2, 4, 8]))
def test_mask_matches_pixel_centre_oracle(x, y, dx, dy, f):
    track = dmc.expand_to_boxes([(x, y)], dx, dy, 64, 64, f)
    x0, y0, x1, y1 = max(0, x - dx), max(0, y - dy), min(64, x + dx), min(64, y + dy)
    n = 64 // f
    oracle = np.zeros((n, n), bool)
    for r in range(n):
        for c in range(n):
            cx, cy = f * c + f / 2, f * r + f / 2
            oracle[r, c] = x0 <= cx <= x1 and y0 <= cy <= y1
    if oracle.any():
        np.testing.assert_array_equal(track.masks[0], oracle)
    else:  # box narrower than a cell: the cell holding the point is used
        assert track.masks[0].sum() == 1 and track.masks[0][int(y // f), int(x // f)]


# -- energies -------------------------------------------------------------

def test_energy_examples():
    a = np.zeros((4, 3))
    a[:, 0] = 1.0
    a[0, 1] = 1.0
    a[1:, 2] = 1.0
    mask = np.array([True, False, False, False])
    assert dmc.energy(a, mask, [1]).item() == pytest.approx(0.0)
    assert dmc.energy(a, mask, [2]).item() == pytest.approx(1.0)
    uni = np.full((4, 2), 0.5)
    assert dmc.energy(uni, mask, [0]).item() == pytest.approx(0.5625)
    with pytest.raises(NumericError):
        dmc.energy(np.zeros((4, 2)), mask, [0])
    with pytest.raises(InputError):
        dmc.energy(uni, mask, [5])


def test_phrase_columns_are_averaged():
    a = np.zeros((4, 3))
    a[0, 0] = 1.0   # token 0 fully inside
    a[1, 1] = 1.0   # token 1 fully outside
    mask = np.array([True, False, False, False])
    assert dmc.energy(a, mask, [0, 1]).item() == pytest.approx(0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(5), size=16)
    mask = rng.random(16) < 0.3
    e = dmc.energy(a, mask, [1, 3]).item()
    assert 0 <= e <= 1


def test_smoothness_examples():
    m = np.random.default_rng(0).random((3, 4, 2))
    assert dmc.temporal_smoothness(np.stack([m[0]] * 4)).item() == 0.0
    b = m[0].copy()
    b[2, 1] += 0.3
    assert dmc.temporal_smoothness([m[0], b]).item() == pytest.approx(0.09)
    a2 = np.sum((m[1] - m[0]) ** 2)
    b2 = np.sum((m[2] - m[1]) ** 2)
    assert dmc.temporal_smoothness(m).item() == pytest.approx((a2 + b2) / 2)
    assert dmc.temporal_smoothness(m[:1]).item() == 0.0
    with pytest.raises(ContractError):
        dmc.temporal_smoothness([m[0], m[0][:2]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_smoothness_nonnegative(seed):
    m = np.random.default_rng(seed).random((4, 6, 3))
    assert dmc.temporal_smoothness(m).item() >= 0


def _records(maps, grid):
    return {"up": dn.AttentionRecord("up", nc.Tensor(maps[None]), grid)}


def test_objective_forms():
    rng = np.random.default_rng(1)
    maps = rng.dirichlet(np.ones(4), size=(3, 16))  # 3 frames, 4x4 grid, 4 tokens
    track = dmc.expand_to_boxes([(4, 4), (8, 8), (12, 12)], 4, 4, 16, 16, 4)
    recs = _records(maps, (4, 4))
    pure = dmc.guidance_objective(recs, track, [1], 0.0, ("up",)).item()
    energies = sum(dmc.energy(maps[i], track.masks[i].ravel(), [1]).item() for i in range(3))
    assert pure == pytest.approx(energies)
    ts = dmc.temporal_smoothness(maps).item()
    literal = dmc.guidance_objective(recs, track, [1], 0.5, ("up",)).item()
    once = dmc.guidance_objective(recs, track, [1], 0.5, ("up",), smoothness_once_per_layer=True).item()
    assert literal == pytest.approx(pure + 0.5 * 3 * ts)
    assert once == pytest.approx(pure + 0.5 * ts)
    with pytest.raises(ContractError):
        dmc.guidance_objective(recs, track, [1], 0.5, ("mid",))


def test_objective_zero_when_aligned_and_static():
    track = dmc.expand_to_boxes([(6, 6)] * 3, 3, 3, 16, 16, 4)
    maps = np.full((3, 16, 2), 0.5)
    inside = track.masks[0].ravel()
    maps[:, :, 1] = 0.0
    maps[:, inside, 1] = 1.0
    maps[:, :, 0] = 1.0 - maps[:, :, 1]
    assert dmc.guidance_objective(_records(maps, (4, 4)), track, [1], 0.5, ("up",)).item() == pytest.approx(0.0)


# -- updates and sampling -------------------------------------------------

def test_guidance_update_examples():
    z = np.zeros((2, 3))
    np.testing.assert_array_equal(dmc.guidance_update(z, np.full((2, 3), 0.5), 2.0, 1.0), -1.0)
    g = np.random.default_rng(0).standard_normal((2, 3))
    assert dmc.guidance_update(z + 1, g, 0.0, 3.0).tobytes() == (z + 1).tobytes()
    with pytest.raises(NumericError, match="layer 'up'"):
        dmc.guidance_update(z, np.full((2, 3), np.nan), 1.0, 1.0, source="layer 'up'")
    with pytest.raises(ContractError):
        dmc.guidance_update(z, np.zeros(3), 1.0, 1.0)


@given(st.floats(0, 1e3), st.floats(1e-3, 30), st.integers(0, 1000))
def test_guidance_update_linear(eta, sigma, seed):
    rng = np.random.default_rng(seed)
    z, g = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    disp = np.linalg.norm(dmc.guidance_update(z, g, eta, sigma) - z)
    assert disp == pytest.approx(sigma ** 2 * eta * np.linalg.norm(g), rel=1e-9, abs=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError):
        dmc.GuidanceConfig(t_final=51).validate(50)
    with pytest.raises(ConfigError):
        dmc.GuidanceConfig(inner_iters=0).validate(50)
    with pytest.raises(ConfigError):
        dmc.GuidanceConfig(eta=-1).validate(50)
    with pytest.raises(ConfigError):
        dmc.GuidanceConfig(layers=()).validate(50)
    assert dmc.GuidanceConfig(t_final=41).guided_count(50) == 10


def toy_setup(seed=0):
    cfg = dn.DenoiserConfig(height=8, width=8, frames=4, init_seed=seed)
    model = dn.Denoiser(cfg)
    rng = np.random.default_rng(seed + 7)
    for k, v in model.params.items():
        model.params[k] = (v + 0.3 * rng.standard_normal(v.shape)).astype(np.float32)
    text = rng.standard_normal((1, 4, 32))
    cond = model.condition(text, 5, (1, 2))
    pts = dmc.interpolate_trajectory([(1, 6, 16), (4, 26, 16)], 4)
    track = dmc.expand_to_boxes(pts, 4, 4, 32, 32, 4)
    return model, cond, track


def test_zero_strength_matches_unguided():
    model, cond, track = toy_setup()
    sched = build_schedule(6, 0.01, 0.3)
    guided = dmc.guided_sample(model, cond, track, (1, 2), dmc.GuidanceConfig(eta=0.0, t_final=1), sched, [3, 4])
    plain = sample(model, cond, sched, [3, 4], (4, 3, 8, 8))
    assert guided.latent.values.tobytes() == plain.values.tobytes()
    assert set(guided.final_records) == {"down", "mid", "up"}


def test_guided_timestep_count_and_trace(tmp_path):
    model, cond, track = toy_setup()
    sched = build_schedule(6, 0.01, 0.3)
    trace = dmc.GuidanceTrace()
    dmc.guided_sample(model, cond, track, (1, 2), dmc.GuidanceConfig(eta=0.01, t_final=6), sched, 0, trace=trace)
    assert [r["t"] for r in trace.rows] == [6]
    trace = dmc.GuidanceTrace()
    dmc.guided_sample(model, cond, track, (1, 2), dmc.GuidanceConfig(eta=0.01, t_final=4, inner_iters=2),
                      sched, 0, trace=trace)
    assert [(r["t"], r["iteration"]) for r in trace.rows] == [(6, 0), (6, 1), (5, 0), (5, 1), (4, 0), (4, 1)]
    trace.write(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,iteration,objective,grad_norm,displacement" and len(lines) == 7
    with pytest.raises(ConfigError):
        dmc.guided_sample(model, cond, track, (1, 2), dmc.GuidanceConfig(t_final=7), sched, 0)


def test_objective_gradient_matches_finite_differences():
    with nc.precision(np.float64):
        model, cond, track = toy_setup(1)
        cfg = dmc.GuidanceConfig(lam=0.5)

        def objective(z):
            _, recs = model.predict_noise(z, 3, cond)
            return dmc.guidance_objective(recs, track, (1, 2), cfg.lam, cfg.layers)

        z = np.random.default_rng(5).standard_normal((4, 3, 8, 8))
        assert nc.finite_diff_check(objective, z, step=1e-4) <= 1e-4


def test_small_steps_improve_objective_monotonically():
    model, cond, track = toy_setup(2)
    z0 = np.random.default_rng(9).standard_normal((1, 4, 3, 8, 8))
    cfg = dmc.GuidanceConfig(lam=0.5)
    found = None
    for eta in [10.0 ** -k for k in range(0, 7)]:   # line search from large to small
        z, values = z0, []
        for _ in range(5):
            obj, grad, _ = dmc.objective_gradient(model, z, 4, cond, track, (1, 2), cfg)
            values.append(obj)
            z = dmc.guidance_update(z, grad, eta, 1.0)
        if all(b <= a for a, b in zip(values, values[1:])):
            found = eta
            break
    assert found is not None


# -- trajectory files -----------------------------------------------------

def _spec(**extra):
    d = {"object": "red ball", "keypoints": [{"frame": 1, "x": 10, "y": 20}, {"frame": 8, "x": 50, "y": 20}],
         "dx": 8, "dy": 8, "frame_width": 64, "frame_height": 64}
    d.update(extra)
    return d


def test_trajectory_file(tmp_path):
    p = tmp_path / "a.traj.json"
    p.write_text(json.dumps(_spec(token_indices=[1, 2])))
    spec = dmc.load_trajectory_spec(p)
    assert spec.keypoints == [(1, 10.0, 20.0), (8, 50.0, 20.0)] and spec.token_indices == (1, 2)
    p.write_text(json.dumps(_spec(speed=3)))
    with pytest.raises(InputError, match="speed"):
        dmc.load_trajectory_spec(p)
    p.write_text(json.dumps({"object": "red ball"}))
    with pytest.raises(InputError, match="keypoints"):
        dmc.load_trajectory_spec(p)
    p.write_text("{not json")
    with pytest.raises(InputError):
        dmc.load_trajectory_spec(p)
    with pytest.raises(StorageError):
        dmc.load_trajectory_spec(tmp_path / "missing.json")
