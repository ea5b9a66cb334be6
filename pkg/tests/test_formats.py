import numpy as np
import pytest

from coalsis.formats import (
    DataFormatError,
    read_fa_sample,
    read_ism,
    read_model,
    write_fa_sample,
    write_ism,
    write_model,
)
from coalsis.ism import IsmSample
from coalsis.model import MutationModel, SiteFlipModel, TypedSample


def _write(tmp_path, text, name="f.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_fa_round_trip(tmp_path):
    s = TypedSample.from_mapping({0: 3, 4: 1, 7: 2})
    p = str(tmp_path / "s.txt")
    write_fa_sample(p, s, 8, 0.25)
    back, d, theta = read_fa_sample(p)
    assert (d, theta) == (8, 0.25)
    assert list(back.types) == list(s.types) and list(back.counts) == list(s.counts)


def test_fa_comments_and_blank_lines(tmp_path):
    p = _write(tmp_path, "# header\n3 0.5\n\n0 2  # two\n2 1\n")
    s, d, theta = read_fa_sample(p)
    assert d == 3 and s.size == 3


@pytest.mark.parametrize(
    "text, line, col",
    [
        ("", 1, 1),
        ("3\n", 1, 2),
        ("3 x\n0 1\n", 1, 3),
        ("3 -1\n0 1\n", 1, 3),
        ("3 0.5\n5 1\n", 2, 1),
        ("3 0.5\n0 1\n0 2\n", 3, 1),
        ("3 0.5\n0 0\n", 2, 3),
        ("3 0.5\n0 1 2\n", 2, 5),
        ("3 0.5\n", 1, 1),
    ],
)
def test_fa_errors(tmp_path, text, line, col):
    p = _write(tmp_path, text)
    with pytest.raises(DataFormatError) as e:
        read_fa_sample(p)
    assert (e.value.line, e.value.col) == (line, col)
    assert f":{line}:{col}:" in str(e.value)


def test_model_round_trip(tmp_path):
    P = np.array([[0.1, 0.9], [0.4, 0.6]])
    p = str(tmp_path / "m.txt")
    write_model(p, MutationModel(1.0, P))
    assert np.array_equal(read_model(p, 1.0).P, P)
    write_model(p, SiteFlipModel(0.5, 20))
    m = read_model(p, 0.5)
    assert isinstance(m, SiteFlipModel) and m.n_sites == 20


@pytest.mark.parametrize(
    "text, line, col",
    [
        ("0.5 0.5\n0.5\n", 2, 4),
        ("0.5 0.5\n0.5 y\n", 2, 5),
        ("sitewise-flip 99\n", 1, 15),
        ("sitewise-flip 4\n1 0\n", 2, 1),
        ("0.5 0.6\n0.5 0.5\n", 1, 1),
    ],
)
def test_model_errors(tmp_path, text, line, col):
    p = _write(tmp_path, text)
    with pytest.raises(DataFormatError) as e:
        read_model(p, 1.0)
    assert (e.value.line, e.value.col) == (line, col)


def test_ism_round_trip(tmp_path):
    s = IsmSample([[1, 0, 0], [0, 1, 0], [0, 1, 1], [0, 0, 0]], [1, 2, 1, 2], [0.1, 0.5, 0.9])
    p = str(tmp_path / "i.txt")
    write_ism(p, s)
    back = read_ism(p)
    assert np.array_equal(back.S, s.S) and list(back.n) == list(s.n)
    assert np.allclose(back.ell, s.ell)


@pytest.mark.parametrize(
    "text, line, col",
    [
        ("2 1\n1 1\n1 0\n", 3, 1),
        ("2 1\n1 1\n1 2\n0.5\n", 3, 3),
        ("2 1\n1 1\n0 0\n0.5\n", 3, 1),
        ("2 1\n1 1\n1 00\n0.5\n", 3, 3),
        ("2 1\n1 1\n1 0\nz\n", 4, 1),
    ],
)
def test_ism_errors(tmp_path, text, line, col):
    p = _write(tmp_path, text)
    with pytest.raises(DataFormatError) as e:
        read_ism(p)
    assert (e.value.line, e.value.col) == (line, col)


def test_shipped_data_parse():
    from importlib.resources import files

    root = files("coalsis") / "data"
    s, d, theta = read_fa_sample(str(root / "fa50.txt"))
    assert s.size == 50 and d == 2**20 and theta == 0.5
    assert read_ism(str(root / "ism55.txt")).size == 55
    assert read_ism(str(root / "ism550.txt")).size == 550
