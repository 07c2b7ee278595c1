import numpy as np
import pytest

from fluxlab.marginal_io import read_marginals, write_marginals
from fluxlab.transport import MarginalSequence


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_round_trip_identity(tmp_path, rng):
    seq = MarginalSequence(
        [rng.standard_normal((5, 3)), rng.standard_normal((4, 3)), rng.standard_normal((6, 3))],
        segment_ids=[0, 1, 2],
        regime_labels=[0, 0, 1],
    )
    path = tmp_path / "m.csv"
    write_marginals(path, seq)
    back = read_marginals(path)
    assert back.T == seq.T
    for k in range(seq.T):
        assert np.array_equal(back.samples(k), seq.samples(k))
    assert back.segment_ids == seq.segment_ids
    assert back.regime_labels == seq.regime_labels


def test_missing_labels_stay_absent(tmp_path, rng):
    seq = MarginalSequence([rng.standard_normal((3, 2)), rng.standard_normal((3, 2))])
    path = tmp_path / "m.csv"
    write_marginals(path, seq)
    back = read_marginals(path)
    assert back.regime_labels is None


def test_ragged_rows_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("k,segment,label,f0,f1\n0,0,-,1.0,2.0\n0,0,-,1.0\n1,1,-,0.0,0.0\n")
    with pytest.raises(ValueError):
        read_marginals(path)


def test_non_contiguous_indices_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("k,segment,label,f0\n0,0,-,1.0\n2,2,-,2.0\n")
    with pytest.raises(ValueError):
        read_marginals(path)


def test_header_validated(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c,f0\n0,0,-,1.0\n")
    with pytest.raises(ValueError):
        read_marginals(path)


def test_write_is_byte_deterministic(tmp_path, rng):
    seq = MarginalSequence([rng.standard_normal((4, 2)), rng.standard_normal((4, 2))])
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    write_marginals(p1, seq)
    write_marginals(p2, seq)
    assert p1.read_bytes() == p2.read_bytes()
