import json

import numpy as np
import pytest

from sqems.cli import EXIT_FIT, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main
from sqems.geometry import implicit_value, radial_distance
from sqems.io import read_cloud, read_column, read_document


@pytest.fixture
def sphere_path(data_dir):
    return str(data_dir / "unit_sphere.xyz")


def _fit(path, out, *flags):
    assert main(["fit", str(path), "--out", str(out), *flags]) == EXIT_OK
    return read_document(out)


def test_fit_unit_sphere(sphere_path, tmp_path):
    doc = _fit(sphere_path, tmp_path / "fit.json")
    sq = doc.superquadric
    assert 0.9 <= sq.eps1 <= 1.1 and 0.9 <= sq.eps2 <= 1.1
    for a in (sq.ax, sq.ay, sq.az):
        assert 0.95 <= a <= 1.05


def test_fit_without_outlier_weight_gives_same_surface(sphere_path, tmp_path):
    a = _fit(sphere_path, tmp_path / "a.json").superquadric.to_superquadric()
    b = _fit(sphere_path, tmp_path / "b.json", "--w-o", "0").superquadric.to_superquadric()
    cloud = read_cloud(sphere_path)
    assert np.mean(np.abs(radial_distance(a, cloud) - radial_distance(b, cloud))) < 1e-3


def test_fit_is_byte_reproducible(sphere_path, tmp_path):
    _fit(sphere_path, tmp_path / "a.json", "--seed", "7")
    _fit(sphere_path, tmp_path / "b.json", "--seed", "7")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fit_to_stdout_and_inliers(sphere_path, tmp_path, capsys):
    assert main(["fit", sphere_path, "--inliers", str(tmp_path / "z.txt")]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["kind"] == "fit"
    z = read_column(tmp_path / "z.txt")
    assert len(z) == len(read_cloud(sphere_path)) and np.all((0 <= z) & (z <= 1))


def test_fit_multi_compound(data_dir, tmp_path):
    path = data_dir / "compound.xyz"
    n = len(read_cloud(path))
    out, lab = tmp_path / "h.json", tmp_path / "labels.txt"
    assert main(["fit-multi", str(path), "--out", str(out), "--labels", str(lab)]) == EXIT_OK
    doc = read_document(out)
    assert len(doc.nodes) == 2 and doc.edges == ((0, 1),)
    labels = read_column(lab, int)
    assert len(labels) == n and set(np.unique(labels)) <= {-1, 0, 1}
    truth = read_column(data_dir / "compound_labels.txt", int)
    assert np.mean(doc.segments == truth) >= 0.95

    assert main(["fit-multi", str(path), "--out", str(out), "--max-layers", "1"]) == EXIT_OK
    assert len(read_document(out).nodes) == 1


def test_sample_round_trip(sphere_path, tmp_path):
    doc = _fit(sphere_path, tmp_path / "fit.json")
    cloud = tmp_path / "s.xyz"
    assert main(["sample", str(tmp_path / "fit.json"), "--out", str(cloud), "--spacing", "0.05"]) == EXIT_OK
    again = _fit(cloud, tmp_path / "fit2.json")
    a, b = doc.superquadric.to_superquadric(), again.superquadric.to_superquadric()
    pts = read_cloud(cloud)
    assert np.mean(np.abs(radial_distance(b, pts))) < 1e-3
    assert np.mean(np.abs(radial_distance(a, pts) - radial_distance(b, pts))) < 1e-3


def test_sample_params_density_and_surface(tmp_path):
    params = "0.5,1.5,1.0,0.8,1.3,0.9,0.1,0.3,0.2,0.5,-1,2"
    counts = []
    for spacing in ("0.1", "0.05"):
        out = tmp_path / f"s{spacing}.ply"
        assert main(["sample", "--params", params, "--spacing", spacing, "--out", str(out)]) == EXIT_OK
        counts.append(len(read_cloud(out)))
    assert 3.5 <= counts[1] / counts[0] <= 4.5
    from sqems.cli import _params_superquadric

    sq = _params_superquadric(params)
    assert np.max(np.abs(implicit_value(sq, sq.pose.to_local(read_cloud(out))) - 1.0)) <= 1e-6


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--count", "3", "--seed", "1", "--out", str(tmp_path / d)]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["shape_000.json", "shape_000.xyz", "shape_001.json", "shape_001.xyz",
                     "shape_002.json", "shape_002.xyz"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    gt = read_document(tmp_path / "a" / "shape_000.json")
    assert gt.corruption == "clean"
    pts = read_cloud(tmp_path / "a" / "shape_000.xyz")
    sq = gt.superquadric.to_superquadric()
    assert np.max(np.abs(implicit_value(sq, sq.pose.to_local(pts)) - 1.0)) <= 1e-6


def test_bench_row_count(tmp_path, capsys):
    out = tmp_path / "rep"
    argv = ["bench", "partial", "1.0,0.6,0.2", "--instances", "5", "--no-timing",
            "--max-iters", "20", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = (out / "partial.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 3 * 5 * 2
    assert "wrote" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["fit"],
    ["fit", "x.xyz", "--w-o", "1.5"],
    ["fit", "x.xyz", "--bogus"],
    ["sample", "--params", "1,1,1"],
    ["sample", "--params", "1,1,-1,1,1"],
    ["synth", "--count", "0"],
    ["bench", "noise", "0.01", "--methods", "magic"],
    ["fit-multi", "x.xyz", "--z-threshold", "1.0"],
])
def test_usage_errors(argv, sphere_path, capsys):
    argv = [sphere_path if a == "x.xyz" else a for a in argv]
    assert main(argv) == EXIT_USAGE


def test_missing_file_is_io_error(tmp_path):
    assert main(["fit", str(tmp_path / "none.xyz")]) == EXIT_IO


def test_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 2\n")
    assert main(["fit", str(bad)]) == EXIT_PARSE
    assert "bad.xyz:2:" in capsys.readouterr().err
    doc = tmp_path / "bad.json"
    doc.write_text("{}")
    assert main(["sample", str(doc)]) == EXIT_PARSE


def test_too_few_points_is_fit_failure(tmp_path):
    small = tmp_path / "small.xyz"
    small.write_text("".join(f"{i} {i * i} {i % 3}\n" for i in range(9)))
    assert main(["fit", str(small)]) == EXIT_FIT
    assert main(["fit-multi", str(small)]) == EXIT_FIT
