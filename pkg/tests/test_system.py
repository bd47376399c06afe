import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accim.errors import ConfigError, UndefinedPointError
from accim.system import (
    BUILTIN_MAPS,
    AffineBranch,
    DomainBox,
    OpenSystem,
    branch_preimage_box,
    builtin_system,
    evaluate,
    system_from_dict,
)


class TestEvaluate:
    def test_tent_interior(self, tent):
        image, escaped = evaluate(tent, 0.2)
        np.testing.assert_allclose(image, [0.6], rtol=0, atol=1e-15)
        assert not escaped

    def test_tent_escape(self, tent):
        image, escaped = evaluate(tent, 0.4)
        np.testing.assert_allclose(image, [1.2], rtol=0, atol=1e-15)
        assert escaped

    def test_saddle(self, saddle_map):
        image, escaped = evaluate(saddle_map, (0.5, 0.5))
        np.testing.assert_allclose(image, [1.0, 0.4], rtol=0, atol=1e-15)
        assert not escaped

    def test_tent_right_branch(self, tent):
        image, escaped = evaluate(tent, 0.9)
        np.testing.assert_allclose(image, [0.3], atol=1e-15)
        assert not escaped

    def test_boundary_resolved_by_lowest_branch(self, tent):
        # 0.5 lies in both branch domains; branch 0 gives 1.5.
        image, escaped = evaluate(tent, 0.5)
        assert image[0] == pytest.approx(1.5)
        assert escaped

    def test_undefined_point(self, tent):
        with pytest.raises(UndefinedPointError):
            evaluate(tent, 1.5)

    def test_wrong_dimension(self, tent):
        with pytest.raises(ValueError):
            evaluate(tent, (0.1, 0.2))


class TestPreimageBox:
    def test_left_tent_branch(self, tent):
        box = branch_preimage_box(tent.branches[0], DomainBox((0.0,), (1.0 / 3.0,)))
        assert box.lower[0] == 0.0
        assert box.upper[0] == pytest.approx(1.0 / 9.0, abs=1e-16)

    def test_saddle_quadrant(self, saddle_map):
        box = branch_preimage_box(saddle_map.branches[0], DomainBox((-1.0, -1.0), (0.0, 0.0)))
        np.testing.assert_allclose(box.lower, [-0.5, -1.0], atol=1e-16)
        np.testing.assert_allclose(box.upper, [0.0, 0.0], atol=1e-16)

    def test_right_tent_branch_by_hand(self, tent):
        # 3(1-x) in [2/3, 1]  <=>  x in [2/3, 7/9]
        box = branch_preimage_box(tent.branches[1], DomainBox((2.0 / 3.0,), (1.0,)))
        np.testing.assert_allclose([box.lower[0], box.upper[0]], [2.0 / 3.0, 7.0 / 9.0],
                                   atol=1e-15)

    def test_empty(self, tent):
        assert branch_preimage_box(tent.branches[0], DomainBox((2.0,), (3.0,))) is None

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(sorted(BUILTIN_MAPS)), st.data())
    def test_images_land_in_target(self, name, data):
        system = builtin_system(name)
        d = system.dimension
        lo = np.array(system.domain.lower)
        hi = np.array(system.domain.upper)
        u = np.sort(np.array([data.draw(st.lists(st.floats(0, 1), min_size=2, max_size=2))
                              for _ in range(d)]), axis=1)
        if np.any(u[:, 1] - u[:, 0] < 1e-6):
            return
        target = DomainBox(lo + u[:, 0] * (hi - lo), lo + u[:, 1] * (hi - lo))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        for br in system.branches:
            pre = branch_preimage_box(br, target)
            if pre is None:
                continue
            pts = np.asarray(pre.lower) + rng.random((50, d)) * pre.widths
            assert np.all(br.domain.contains(pts))
            assert np.all(target.contains(br.apply(pts), tol=1e-12))


class TestSystemInvariants:
    @pytest.mark.parametrize("name", sorted(BUILTIN_MAPS))
    def test_coverage_and_overlap(self, name):
        system = builtin_system(name)
        total = sum(br.domain.measure for br in system.branches)
        assert abs(total - system.domain.measure) <= 1e-12
        for a, b in itertools.combinations(system.branches, 2):
            assert a.domain.intersect(b.domain) is None

    def test_zero_slope_rejected(self):
        with pytest.raises(ValueError):
            AffineBranch(DomainBox((0.0,), (1.0,)), (0.0,), (0.0,))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            DomainBox((1.0,), (1.0,))

    def test_overlapping_branches_rejected(self):
        box = DomainBox((0.0,), (1.0,))
        with pytest.raises(ValueError, match="overlap"):
            OpenSystem(box, (AffineBranch(DomainBox((0.0,), (0.6,)), (2.0,), (0.0,)),
                             AffineBranch(DomainBox((0.4,), (1.0,)), (2.0,), (0.0,))))

    def test_incomplete_cover_rejected(self):
        box = DomainBox((0.0,), (1.0,))
        with pytest.raises(ValueError, match="cover"):
            OpenSystem(box, (AffineBranch(DomainBox((0.0,), (0.5,)), (2.0,), (0.0,)),))

    def test_immutable(self, tent):
        with pytest.raises(AttributeError):
            tent.name = "other"

    def test_fingerprint_depends_on_geometry(self, tent, saddle_map):
        assert tent.fingerprint() == builtin_system("tent3").fingerprint()
        assert tent.fingerprint() != saddle_map.fingerprint()


class TestConfigSchema:
    def test_round_trip(self, tent):
        rebuilt = system_from_dict(tent.to_dict())
        assert rebuilt.branches == tent.branches
        assert rebuilt.domain == tent.domain

    def test_missing_field_named(self):
        data = {"domain": {"lower": [0], "upper": [1]},
                "branches": [{"lower": [0], "upper": [1], "slopes": [2]}]}
        with pytest.raises(ConfigError, match=r"branches\[0\].*offsets"):
            system_from_dict(data)

    def test_unknown_builtin(self):
        with pytest.raises(ConfigError, match="unknown map"):
            builtin_system("logistic")
