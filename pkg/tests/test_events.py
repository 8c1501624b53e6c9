import numpy as np
import pytest
from hypothesis import given, strategies as st

from evresid.events import (EVS_HEADER, EVS_RECORD, CoverageError, EventFormatError, EventStream, SegmentPlan,
                            load_events, save_events, split_segments, voxelize, voxelize_arrays)


def random_stream(rng, n=1000, res=(32, 24), t_max=100_000):
    t = np.sort(rng.integers(0, t_max, n))
    x = rng.integers(0, res[0], n)
    y = rng.integers(0, res[1], n)
    p = rng.choice([-1, 1], n)
    return EventStream(res, t, x, y, p)


def voxel_oracle(t, x, y, p, bins, span, shape):
    """Direct triple-sum of the bilinear kernels over every voxel."""
    H, W = shape
    out = np.zeros((bins, H, W))
    ts = (bins - 1) * (np.asarray(t, float) - span[0]) / (span[1] - span[0])
    k = lambda a: max(0.0, 1.0 - abs(a))
    for b in range(bins):
        for yy in range(H):
            for xx in range(W):
                out[b, yy, xx] = sum(pi * k(xx - xi) * k(yy - yi) * k(b - ti)
                                     for ti, xi, yi, pi in zip(ts, x, y, p))
    return out


# -- file format


def test_empty_file_roundtrip(tmp_path):
    s = EventStream((40, 30))
    save_events(s, tmp_path / "e.evs")
    assert (tmp_path / "e.evs").stat().st_size == EVS_HEADER.size
    r = load_events(tmp_path / "e.evs")
    assert len(r) == 0 and r.resolution == (40, 30)


def test_tie_order_preserved(tmp_path):
    s = EventStream.from_events((4, 4), [(10, 1, 2, 1), (10, 0, 0, -1)])
    save_events(s, tmp_path / "e.evs")
    assert (tmp_path / "e.evs").stat().st_size == EVS_HEADER.size + 2 * EVS_RECORD.itemsize
    r = load_events(tmp_path / "e.evs")
    assert list(r) == [(10, 1, 2, 1), (10, 0, 0, -1)]


def test_random_roundtrip_bytes(tmp_path, rng):
    s = random_stream(rng)
    save_events(s, tmp_path / "a.evs")
    r = load_events(tmp_path / "a.evs")
    assert r == s
    save_events(r, tmp_path / "b.evs")
    assert (tmp_path / "a.evs").read_bytes() == (tmp_path / "b.evs").read_bytes()


@pytest.mark.parametrize("corrupt", ["magic", "coords", "order", "polarity", "truncated"])
def test_malformed_files_report_offset(tmp_path, corrupt):
    s = EventStream.from_events((4, 4), [(1, 1, 1, 1), (2, 2, 2, -1)])
    save_events(s, tmp_path / "e.evs")
    raw = bytearray((tmp_path / "e.evs").read_bytes())
    h, rec = EVS_HEADER.size, EVS_RECORD.itemsize
    if corrupt == "magic":
        raw[0:4] = b"XXXX"
    elif corrupt == "coords":
        raw[h + rec + 8:h + rec + 10] = (9).to_bytes(2, "little")
    elif corrupt == "order":
        raw[h + rec:h + rec + 8] = (0).to_bytes(8, "little", signed=True)
    elif corrupt == "polarity":
        raw[h + 12] = 0
    else:
        raw = raw[:-3]
    (tmp_path / "e.evs").write_bytes(bytes(raw))
    with pytest.raises(EventFormatError) as exc:
        load_events(tmp_path / "e.evs")
    assert exc.value.offset >= 0


# -- splitting


def test_split_interval_membership():
    plan = SegmentPlan(1000, 2000, 5)
    t = [1000 + int(2.5 * 200)] * 3
    s = EventStream((4, 4), t, [0, 1, 2], [0, 0, 0], [1, 1, -1], span=(800, 2000))
    ref, targets = split_segments(s, plan)
    assert len(ref) == 0
    assert [len(x) for x in targets] == [0, 0, 3, 0, 0]


def test_event_at_tk_goes_to_first_target():
    plan = SegmentPlan(1000, 2000, 5)
    s = EventStream((4, 4), [999, 1000, 2000], [0, 0, 0], [0, 0, 0], [1, 1, 1], span=(800, 2000))
    ref, targets = split_segments(s, plan)
    assert list(ref.t) == [999]
    assert list(targets[0].t) == [1000]
    assert list(targets[-1].t) == [2000]  # last target closed at T_k1


def test_uniform_stream_counts():
    plan = SegmentPlan(60_000, 160_000, 5)
    t = np.arange(40_000, 160_000, 7)
    s = EventStream((4, 4), t, np.zeros_like(t), np.zeros_like(t), np.ones_like(t), span=(40_000, 160_000))
    ref, targets = split_segments(s, plan)
    counts = [len(ref)] + [len(x) for x in targets]
    assert max(abs(c - t.size / 6) for c in counts) <= 1


def test_coverage_error():
    plan = SegmentPlan(1000, 2000, 5)
    s = EventStream((4, 4), [1500], [0], [0], [1], span=(900, 2000))
    with pytest.raises(CoverageError):
        split_segments(s, plan)


def test_plan_divisibility():
    with pytest.raises(ValueError):
        SegmentPlan(0, 1001, 5)
    with pytest.raises(ValueError):
        SegmentPlan(0, 1000, 0)


@given(st.integers(0, 2**31), st.integers(1, 8))
def test_split_is_partition(seed, N):
    rng = np.random.default_rng(seed)
    dt = 100
    plan = SegmentPlan(1000, 1000 + N * dt, N)
    s = random_stream(rng, n=200, res=(8, 8), t_max=1000 + N * dt + 50)
    ref, targets = split_segments(EventStream(s.resolution, s.t, s.x, s.y, s.p), plan)
    joined = np.concatenate([ref.t] + [x.t for x in targets])
    sel = (s.t >= plan.T_k - dt) & (s.t <= plan.T_k1)
    assert np.array_equal(joined, s.t[sel])


# -- voxelization


def test_voxel_single_event_integer():
    s = EventStream((8, 8), [100], [3], [4], [1])
    g = voxelize(s, 2, (100, 200)).data
    assert g[0, 4, 3] == 1.0 and np.count_nonzero(g) == 1


def test_voxel_fractional_example():
    # x = 3.5, y = 4, t* = 1.25 with B = 3
    span = (0, 200)
    t = 1.25 / 2 * 200
    g = voxelize_arrays([t], [3.5], [4.0], [1.0], 3, span, (8, 8))
    assert g[1, 4, 3] == pytest.approx(0.375, abs=1e-15)
    assert g[1, 4, 4] == pytest.approx(0.375, abs=1e-15)
    assert g[2, 4, 3] == pytest.approx(0.125, abs=1e-15)
    assert g[2, 4, 4] == pytest.approx(0.125, abs=1e-15)
    assert g.sum() == pytest.approx(1.0)


def test_voxel_empty():
    g = voxelize(EventStream((8, 6)), 2, (0, 10)).data
    assert g.shape == (2, 6, 8) and not g.any()


@pytest.mark.parametrize("seed", range(5))
def test_voxel_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 25
    t = rng.uniform(0, 1000, n)
    x = rng.uniform(0, 5, n)
    y = rng.uniform(0, 4, n)
    p = rng.choice([-1.0, 1.0], n)
    got = voxelize_arrays(t, x, y, p, 3, (0, 1000), (4, 5))
    np.testing.assert_allclose(got, voxel_oracle(t, x, y, p, 3, (0, 1000), (4, 5)), atol=1e-12)


@given(st.integers(0, 2**31))
def test_polarity_mass_conserved(seed):
    rng = np.random.default_rng(seed)
    n = 50
    t = rng.uniform(1, 999, n)
    x = rng.uniform(1, 10, n)
    y = rng.uniform(1, 8, n)
    p = rng.choice([-1.0, 1.0], n)
    g = voxelize_arrays(t, x, y, p, 3, (0, 1000), (10, 12))
    assert g.sum() == pytest.approx(p.sum(), abs=1e-9)


@given(st.integers(0, 2**31), st.integers(-3, 3), st.integers(-3, 3))
def test_shift_equivariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    n = 40
    t = rng.uniform(0, 1000, n)
    x = rng.integers(4, 12, n).astype(float) + rng.uniform(0, 1, n)
    y = rng.integers(4, 12, n).astype(float) + rng.uniform(0, 1, n)
    p = rng.choice([-1.0, 1.0], n)
    a = voxelize_arrays(t, x, y, p, 2, (0, 1000), (20, 20))
    b = voxelize_arrays(t, x + dx, y + dy, p, 2, (0, 1000), (20, 20))
    np.testing.assert_allclose(np.roll(a, (dy, dx), axis=(1, 2)), b, atol=1e-12)


def test_event_time_normalization_flag():
    s = EventStream((4, 4), [200, 400], [1, 1], [1, 1], [1, 1])
    g = voxelize(s, 2, (0, 1000), time_norm="events").data
    assert g[0, 1, 1] == pytest.approx(1.0) and g[1, 1, 1] == pytest.approx(1.0)
