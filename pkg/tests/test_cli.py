import csv
import json
import warnings

import numpy as np
import pytest

from accim.cli import (
    SWEEP_COLUMNS,
    RunConfig,
    alpha_grid,
    config_from_mapping,
    load_config,
    load_or_compute_overlap,
    main,
    parse_alpha_range,
    parse_resolution,
    run,
)
from accim.errors import ConfigError
from accim.solver import SolverConfig, entropy, reconstruct_density, solve


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tent_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("tent_sweep")
    config = RunConfig(map="tent3", resolution=1000, alphas=tuple(alpha_grid(0.10, 0.90, 0.05)),
                       out=out)
    return run(config), out


class TestAlphaGrid:
    def test_tent_sweep_grid(self):
        grid = alpha_grid(0.10, 0.90, 0.05)
        assert len(grid) == 17
        assert grid[0] == 0.1 and grid[-1] == 0.9
        assert 0.65 in grid

    def test_range_string(self):
        assert parse_alpha_range("0.3:0.75:0.15") == [0.3, 0.45, 0.6, 0.75]

    def test_single_point(self):
        assert alpha_grid(0.5, 0.5, 0.1) == [0.5]

    @pytest.mark.parametrize("text", ["0.9:0.1:0.1", "0.1:0.9:0", "0.1:0.9", "a:b:c"])
    def test_bad_ranges(self, text):
        with pytest.raises(ConfigError):
            parse_alpha_range(text)

    def test_empty_range_writes_nothing(self, tmp_path):
        out = tmp_path / "out"
        code = main(["sweep", "--map", "tent3", "--resolution", "10", "--alpha-range",
                     "0.9:0.1:0.05", "--out", str(out)])
        assert code == 2
        assert not out.exists()


class TestParsing:
    @pytest.mark.parametrize("value, expected", [(1000, (1000,)), ("1000", (1000,)),
                                                 ("100x100", (100, 100)), ([20, 30], (20, 30))])
    def test_resolution(self, value, expected):
        assert parse_resolution(value) == expected

    @pytest.mark.parametrize("value", [0, "-3", "10x0", "abc", 2.5])
    def test_bad_resolution(self, value):
        with pytest.raises(ConfigError):
            parse_resolution(value)

    def test_alpha_forms(self):
        assert config_from_mapping({"alpha": 0.5}).alphas == (0.5,)
        assert config_from_mapping({"alpha": [0.2, 0.4]}).alphas == (0.2, 0.4)
        rng = {"start": 0.2, "stop": 0.4, "step": 0.1}
        assert config_from_mapping({"alpha": rng}).alphas == (0.2, 0.3, 0.4)
        assert config_from_mapping({"alpha": "0.2:0.4:0.1"}).alphas == (0.2, 0.3, 0.4)

    @pytest.mark.parametrize("data", [{"alpha": 1.5}, {"alpha": {"start": 0.1, "stop": 0.5}},
                                      {"backend": "magic"}, {"colour": "red"},
                                      {"tol": "fast"}, {"map": 3}])
    def test_invalid_fields(self, data):
        with pytest.raises(ConfigError):
            config_from_mapping(data)

    def test_overrides_win(self):
        cfg = config_from_mapping({"map": "saddle", "tol": 1e-9}, tol=1e-11, seed=None)
        assert cfg.map == "saddle" and cfg.tol == 1e-11


class TestConfigFiles:
    def test_yaml_with_custom_map(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(
            "map:\n"
            "  domain: {lower: [0.0], upper: [1.0]}\n"
            "  branches:\n"
            "    - {lower: [0.0], upper: [0.5], slopes: [3.0], offsets: [0.0]}\n"
            "    - {lower: [0.5], upper: [1.0], slopes: [-3.0], offsets: [3.0]}\n"
            "resolution: 30\n"
            "alpha: {start: 0.5, stop: 0.7, step: 0.1}\n")
        cfg = config_from_mapping(load_config(path))
        report = run(cfg)
        builtin = run(RunConfig(map="tent3", resolution=30, alphas=cfg.alphas))
        assert [r.entropy for r in report.rows] == [r.entropy for r in builtin.rows]

    def test_syntax_error_has_line(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("map: tent3\nresolution: [10\nalpha: 0.5\n")
        with pytest.raises(ConfigError, match=r"line \d+"):
            load_config(path)

    def test_field_error_has_line(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("map: tent3\nresolution: 10\nbackend: magic\n")
        with pytest.raises(ConfigError, match=r"line 3.*backend"):
            load_config(path)

    def test_branch_error_names_field(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("map:\n  domain: {lower: [0], upper: [1]}\n"
                        "  branches:\n    - {lower: [0], upper: [1], slopes: [2]}\n")
        with pytest.raises(ConfigError, match=r"line 1.*branches\[0\].*offsets"):
            config_from_mapping(load_config(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_main_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("alpha: 2\n")
        assert main(["run", "--config", str(path)]) == 2
        assert "config error" in capsys.readouterr().err


class TestCache:
    def test_write_then_load(self, tmp_path):
        cache = tmp_path / "ov.txt"
        cfg = RunConfig(map="tent3", resolution=50, cache=cache)
        first = load_or_compute_overlap(cfg)
        assert cache.exists()
        stamp = cache.stat().st_mtime_ns
        second = load_or_compute_overlap(cfg)
        assert cache.stat().st_mtime_ns == stamp
        assert (first.C != second.C).nnz == 0
        np.testing.assert_array_equal(first.C.data, second.C.data)
        np.testing.assert_array_equal(first.c, second.c)

    def test_resolution_change_is_a_miss(self, tmp_path, caplog):
        cache = tmp_path / "ov.txt"
        load_or_compute_overlap(RunConfig(map="tent3", resolution=50, cache=cache))
        with caplog.at_level("INFO", logger="accim"):
            ov = load_or_compute_overlap(RunConfig(map="tent3", resolution=60, cache=cache))
        assert ov.n == 60
        assert "different problem" in caplog.text
        again = load_or_compute_overlap(RunConfig(map="tent3", resolution=60, cache=cache))
        assert again.n == 60

    def test_map_change_is_a_miss(self, tmp_path):
        cache = tmp_path / "ov.txt"
        load_or_compute_overlap(RunConfig(map="tent3", resolution=9, cache=cache))
        ov = load_or_compute_overlap(RunConfig(map="identity", resolution=9, cache=cache))
        assert ov.c.sum() == 0

    def test_truncated_cache(self, tmp_path):
        cache = tmp_path / "ov.txt"
        cfg = RunConfig(map="tent3", resolution=40, cache=cache)
        ref = load_or_compute_overlap(cfg)
        text = cache.read_text()
        cache.write_text(text[: len(text) // 2])
        with pytest.warns(RuntimeWarning, match="corrupt"):
            ov = load_or_compute_overlap(cfg)
        np.testing.assert_array_equal(ov.C.toarray(), ref.C.toarray())
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_or_compute_overlap(cfg)

    def test_overlap_subcommand(self, tmp_path, capsys):
        cache = tmp_path / "ov.txt"
        assert main(["overlap", "--map", "tent3", "--resolution", "12", "--cache",
                     str(cache)]) == 0
        assert cache.exists()
        assert "n=12" in capsys.readouterr().out


class TestSweepOutputs:
    def test_row_count_and_argmax(self, tent_sweep):
        report, _ = tent_sweep
        assert len(report.rows) == 17
        assert all(r.converged for r in report.rows)
        assert report.argmax_alpha == 0.65

    def test_entropy_unimodal(self, tent_sweep):
        report, _ = tent_sweep
        neg = [r.neg_entropy for r in report.rows]
        low = int(np.argmin(neg))
        assert all(neg[i + 1] < neg[i] - 1e-10 for i in range(low))
        assert all(neg[i + 1] > neg[i] + 1e-10 for i in range(low, len(neg) - 1))

    def test_files(self, tent_sweep):
        report, out = tent_sweep
        rows = read_csv(out / "sweep.csv")
        assert rows[0] == SWEEP_COLUMNS
        assert len(rows) == 18
        for line, r in zip(rows[1:], report.rows):
            assert float(line[0]) == r.alpha
            assert float(line[1]) == r.entropy
            assert line[7] == "true"
        density = read_csv(out / "density_alpha_0.65.csv")
        assert density[0] == ["cell_index", "x0", "density"]
        assert len(density) == 1001
        mask = read_csv(out / "mask.csv")
        assert all(m[-1] == "1" for m in mask[1:])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["argmax_alpha"] == 0.65
        assert summary["kept_cells"] == 1000
        assert len(summary["rows"]) == 17

    def test_sweep_matches_independent_solve(self, tent_sweep, tent_reduced):
        report, _ = tent_sweep
        red = tent_reduced(1000)
        for r in report.rows[::4]:
            sol = solve(red, SolverConfig(r.alpha))
            dens, _, _ = reconstruct_density(sol.state, red, r.alpha)
            assert abs(entropy(dens) - r.entropy) <= 1e-12

    def test_deterministic(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            cfg = RunConfig(map="saddle", resolution=(20, 20), backend="sampled", samples=16,
                            seed=3, alphas=(0.4, 0.6), out=tmp_path / name, workers=2)
            rep = run(cfg)
            outputs.append((rep.rows, {p.name: p.read_bytes()
                                       for p in sorted((tmp_path / name).glob("*.csv"))}))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]

    def test_workers_match_serial(self):
        alphas = (0.3, 0.5, 0.7)
        serial = run(RunConfig(map="tent3", resolution=60, alphas=alphas))
        pooled = run(RunConfig(map="tent3", resolution=60, alphas=alphas, workers=3))
        assert serial.rows == pooled.rows

    def test_failed_alpha_is_recorded(self):
        report = run(RunConfig(map="tent3", resolution=60, alphas=(0.3, 0.5), max_iter=2))
        assert [r.converged for r in report.rows] == [False, False]
        assert report.argmax_alpha is None
        assert np.isnan(report.rows[0].entropy)


class TestSaddleSweep:
    def test_density_support(self, tmp_path):
        out = tmp_path / "s"
        code = main(["sweep", "--map", "saddle", "--resolution", "100x100", "--alpha-range",
                     "0.3:0.75:0.15", "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert [float(r[0]) for r in rows[1:]] == [0.3, 0.45, 0.6, 0.75]
        for alpha in ("0.3", "0.45", "0.6", "0.75"):
            dens = read_csv(out / f"density_alpha_{alpha}.csv")
            assert dens[0] == ["cell_index", "x0", "x1", "density"]
            y = np.array([float(r[2]) for r in dens[1:]])
            f = np.array([float(r[3]) for r in dens[1:]])
            assert np.all(f[np.abs(y) > 0.08] == 0)
            assert np.all(f[np.abs(y) < 0.08] > 0)
        mask = read_csv(out / "mask.csv")
        assert sum(int(m[-1]) for m in mask[1:]) == 800


def test_run_prints_table(capsys):
    assert main(["run", "--map", "tent3", "--resolution", "30", "--alpha", "0.5", "0.6"]) == 0
    text = capsys.readouterr().out
    assert "argmax alpha: 0.6" in text


def test_run_nonconvergence_exit_code():
    assert main(["run", "--map", "tent3", "--resolution", "30", "--alpha", "0.5",
                 "--max-iter", "1"]) == 1


def test_empty_reduced_domain_exit_code(tmp_path, capsys):
    path = tmp_path / "escape.yaml"
    path.write_text("map:\n  domain: {lower: [0], upper: [1]}\n"
                    "  branches:\n    - {lower: [0], upper: [1], slopes: [1], offsets: [5]}\n")
    assert main(["run", "--config", str(path), "--resolution", "10", "--alpha", "0.5"]) == 1
    assert "reduced domain is empty" in capsys.readouterr().err
