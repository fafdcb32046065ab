import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from truncml.errors import DomainError
from truncml.grid import (
    GridSpec,
    SiteSet,
    generate,
    lattice_points,
    min_spacing,
    min_spacing_bruteforce,
    neighbor_pairs,
    packing_bound,
    read_sites_binary,
    read_sites_csv,
    sites_from_bytes,
    sites_to_bytes,
    write_sites_binary,
    write_sites_csv,
)


def test_spec_validation():
    for bad in (dict(d=0, tau=0.1, n=3), dict(d=2, tau=0.5, n=3), dict(d=2, tau=-0.1, n=3), dict(d=2, tau=0.1, n=0)):
        with pytest.raises(DomainError):
            GridSpec(**bad)
    with pytest.raises(DomainError):
        GridSpec(2, 0.1, 3, seed=-1)
    assert GridSpec(2, 0.3, 5).spacing == pytest.approx(0.4)


def test_unperturbed_square():
    sites = generate(GridSpec(2, 0.0, 4, seed=9))
    np.testing.assert_array_equal(sites.coords, [[1, 1], [1, 2], [2, 1], [2, 2]])


def test_shell_order():
    # shell 3 in lexicographic order after the 2x2 block
    pts = lattice_points(2, 9)
    np.testing.assert_array_equal(pts[4:], [[1, 3], [2, 3], [3, 1], [3, 2], [3, 3]])


@pytest.mark.parametrize("d", [1, 2, 3])
def test_complete_shells_enumerate_cube(d):
    for shell in (1, 2, 3):
        pts = lattice_points(d, shell**d)
        want = {tuple(int(c) + 1 for c in q) for q in np.ndindex(*(shell,) * d)}
        assert {tuple(int(c) for c in p) for p in pts} == want


def test_perturbation_bounded():
    sites = generate(GridSpec(1, 0.25, 3, seed=4))
    np.testing.assert_array_less(np.abs(sites.coords[:, 0] - [1, 2, 3]), 0.25 + 1e-15)
    assert min_spacing(sites) >= 0.5


def test_seeded_determinism():
    a = generate(GridSpec(3, 0.2, 50, seed=123))
    b = generate(GridSpec(3, 0.2, 50, seed=123))
    c = generate(GridSpec(3, 0.2, 50, seed=124))
    assert a == b and not a == c


def test_head_is_prefix():
    s = generate(GridSpec(2, 0.3, 40, seed=1))
    np.testing.assert_array_equal(s.head(10).coords, s.coords[:10])


def test_coords_read_only():
    s = generate(GridSpec(2, 0.3, 4, seed=1))
    with pytest.raises(ValueError):
        s.coords[0, 0] = 5.0


class TestMinSpacing:
    def test_integer_line(self):
        assert min_spacing(generate(GridSpec(1, 0.0, 5))) == 1.0

    def test_large_tau(self):
        for seed in range(20):
            assert min_spacing(generate(GridSpec(2, 0.4, 100, seed=seed))) >= 0.2 - 1e-12

    def test_needs_two_sites(self):
        with pytest.raises(DomainError):
            min_spacing(generate(GridSpec(2, 0.1, 1)))

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = int(rng.integers(1, 4))
            pts = rng.uniform(0, 6, size=(200, d))
            assert min_spacing(SiteSet(pts, 0.0)) == min_spacing_bruteforce(SiteSet(pts, 0.0))

    def test_sparse_far_points(self):
        # cell search has to grow its radius
        assert min_spacing(SiteSet([[0.0], [10.0], [30.0]], 0.0)) == 10.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.floats(0.0, 0.49), st.integers(0, 2**32))
    def test_guaranteed_spacing(self, d, tau, seed):
        sites = generate(GridSpec(d, tau, 60, seed=seed))
        assert min_spacing(sites) >= 1 - 2 * tau - 1e-12


@pytest.mark.slow
@pytest.mark.parametrize("d", [1, 2, 3])
def test_guaranteed_spacing_many_seeds(d):
    for seed in range(1000):
        assert min_spacing(generate(GridSpec(d, 0.35, 64, seed=seed))) >= 0.3 - 1e-12


def test_neighbor_pairs_bruteforce():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 10, size=(150, 2))
    i, j, dist = neighbor_pairs(pts, 1.3)
    full = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    bi, bj = np.nonzero(np.triu(full < 1.3, k=1))
    assert set(zip(i.tolist(), j.tolist())) == set(zip(bi.tolist(), bj.tolist()))
    np.testing.assert_allclose(dist, full[i, j], rtol=0, atol=0)


def test_neighbor_pairs_strictness():
    pts = np.array([[0.0], [1.0]])
    assert neighbor_pairs(pts, 1.0)[0].size == 0
    assert neighbor_pairs(pts, 1.0, strict=False)[0].size == 1


class TestPacking:
    def test_plug_in_value(self):
        assert packing_bound(2, 2.0, 0.0) == 64.0

    @pytest.mark.parametrize("d,radius", [(1, 1.0), (2, 1.0), (2, 2.0), (2, 5.0), (3, 2.0)])
    def test_neighbour_counts(self, d, radius):
        sites = generate(GridSpec(d, 0.3, 300, seed=11))
        i, j, _ = neighbor_pairs(sites.coords, radius, strict=False)
        counts = np.bincount(np.concatenate([i, j]), minlength=sites.n)
        assert counts.max() <= packing_bound(d, radius, 0.3)


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        sites = generate(GridSpec(2, 0.3, 20, seed=2))
        path = tmp_path / "s.csv"
        write_sites_csv(sites, path)
        back = read_sites_csv(path, tau=0.3, seed=2)
        assert back == sites
        assert path.read_text().splitlines()[0] == "index,x1,x2"

    def test_csv_buffer(self):
        sites = generate(GridSpec(1, 0.1, 3, seed=2))
        buf = io.StringIO()
        write_sites_csv(sites, buf)
        buf.seek(0)
        np.testing.assert_array_equal(read_sites_csv(buf).coords, sites.coords)

    def test_binary_round_trip(self, tmp_path):
        sites = generate(GridSpec(3, 0.2, 17, seed=2**63 + 5))
        path = tmp_path / "s.bin"
        write_sites_binary(sites, path)
        assert read_sites_binary(path) == sites
        assert len(sites_to_bytes(sites)) == 40 + 17 * 3 * 8

    def test_binary_bad_magic(self):
        with pytest.raises(ValueError):
            sites_from_bytes(b"XXXX" + bytes(60))
