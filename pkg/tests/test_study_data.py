import json

import numpy as np
import pytest

from interfere_ps.errors import (
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    EmptyClusterError,
    InvalidPermutationError,
    NonBinaryTreatmentError,
    ParseError,
)
from interfere_ps.study_data import (
    Cluster,
    Study,
    TreatmentVector,
    Unit,
    all_treatment_vectors,
    build_study,
    load_study,
    permute_cluster,
    save_study,
    validate_study,
)


def write_csv(tmp_path, text, name="study.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_build_study_groups_and_orders(small_study):
    """Test clusters keep file order and units are sorted by unit_id"""
    assert small_study.cluster_ids == ["a", "b", "c"]
    assert small_study.n == 6
    c = small_study.cluster("c")
    assert [u.unit_id for u in c.units] == [3, 5, 7]
    assert [u.unit_index for u in c.units] == [0, 1, 2]
    assert list(c.treatments) == [1, 0, 1]


def test_stacked_offsets(small_study):
    """Test stacked arrays and cluster offsets"""
    X, z, offsets = small_study.stacked()
    assert X.shape == (6, 2)
    assert list(offsets) == [0, 2, 3, 6]
    assert list(z) == [1, 0, 0, 1, 0, 1]


def test_load_csv(tmp_path):
    """Test reading the long CSV schema with an empty outcome"""
    path = write_csv(
        tmp_path,
        "cluster_id,unit_id,treatment,outcome,x1\n"
        "k1,0,1,2.5,0.1\n"
        "k1,1,0,,0.2\n"
        "k2,0,0,1.0,-0.3\n",
    )
    study = load_study(str(path))
    assert study.p == 1
    assert study.cluster("k1").units[1].outcome is None
    assert not study.has_outcomes


def test_csv_roundtrip(tmp_path, simulated):
    """Test save_study / load_study keeps every value"""
    path = tmp_path / "copy.csv"
    save_study(simulated.study, str(path))
    loaded = load_study(str(path))
    assert loaded == simulated.study


def test_json_roundtrip(tmp_path, small_study):
    """Test JSON studies load back identically"""
    path = tmp_path / "study.json"
    save_study(small_study, str(path))
    assert load_study(str(path)) == small_study


def test_json_accepts_integral_float_treatment(tmp_path):
    """Test 1.0 is read as treatment 1 in JSON"""
    payload = [{"id": "a", "units": [{"unit_id": 0, "treatment": 1.0, "covariates": [0.5]}]}]
    path = tmp_path / "s.json"
    path.write_text(json.dumps(payload))
    assert load_study(str(path)).clusters[0].units[0].treatment == 1


def test_json_empty_cluster(tmp_path):
    """Test a JSON cluster without units is reported, not dropped"""
    payload = [
        {"id": "a", "units": [{"unit_id": 0, "treatment": 1, "covariates": [0.5]}]},
        {"id": "b", "units": []},
    ]
    path = tmp_path / "s.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(EmptyClusterError, match="'b'"):
        load_study(str(path))


@pytest.mark.parametrize(
    "text, line",
    [
        ("cluster_id,unit_id,treatment,outcome\nk,0,yes,1.0\n", 2),
        ("cluster_id,unit_id,treatment,outcome\nk,0,1,1.0\nk,1,1,abc\n", 3),
        ("cluster_id,unit_id,outcome\nk,0,1.0\n", 1),
    ],
)
def test_parse_errors_name_the_line(tmp_path, text, line):
    """Test malformed rows raise ParseError with the line number"""
    path = write_csv(tmp_path, text)
    with pytest.raises(ParseError) as excinfo:
        load_study(str(path))
    assert excinfo.value.line == line
    assert f"line {line}" in str(excinfo.value)


def test_non_binary_treatment(tmp_path):
    """Test a treatment of 2 is rejected"""
    path = write_csv(tmp_path, "cluster_id,unit_id,treatment,outcome\nk,0,2,1.0\n")
    with pytest.raises(NonBinaryTreatmentError):
        load_study(str(path))


def test_duplicate_unit_id(tmp_path):
    """Test repeated unit ids inside a cluster"""
    path = write_csv(tmp_path, "cluster_id,unit_id,treatment,outcome\nk,0,1,1.0\nk,0,0,1.0\n")
    with pytest.raises(DuplicateIdError):
        load_study(str(path))


def test_validate_rejects_bad_structures():
    """Test the structural invariants of validate_study"""
    unit = Unit("a", 0, 1, (0.1,))
    with pytest.raises(DuplicateIdError):
        validate_study(Study((Cluster("a", (unit,)), Cluster("a", (unit,))), 1))
    with pytest.raises(EmptyClusterError):
        validate_study(Study((Cluster("a", ()),), 1))
    with pytest.raises(DimensionMismatchError):
        validate_study(Study((Cluster("a", (Unit("a", 0, 1, (0.1, 0.2)),)),), 1))
    with pytest.raises(DimensionMismatchError):
        validate_study(Study((Cluster("a", (Unit("a", 0, 1, (float("nan"),)),)),), 1))


def test_data_errors_are_value_errors():
    """Test data errors can be caught as ValueError"""
    assert issubclass(ParseError, DataError)
    assert issubclass(ParseError, ValueError)


def test_permute_cluster(small_study):
    """Test position k receives unit perm[k] and indices are renumbered"""
    c = small_study.cluster("c")
    moved = permute_cluster(c, [2, 0, 1])
    assert [u.unit_id for u in moved.units] == [7, 3, 5]
    assert [u.unit_index for u in moved.units] == [0, 1, 2]
    np.testing.assert_array_equal(moved.covariates[0], c.covariates[2])


@pytest.mark.parametrize("perm", [[0, 1], [0, 0, 1], [1, 2, 3]])
def test_permute_cluster_rejects(small_study, perm):
    """Test invalid permutations"""
    with pytest.raises(InvalidPermutationError):
        permute_cluster(small_study.cluster("c"), perm)


def test_all_treatment_vectors():
    """Test enumeration order and read-only cache"""
    W = all_treatment_vectors(3)
    assert W.shape == (8, 3)
    assert list(W[0]) == [0, 0, 0]
    assert list(W[1]) == [0, 0, 1]
    assert list(W[-1]) == [1, 1, 1]
    assert len({tuple(w) for w in W}) == 8
    assert not W.flags.writeable
    assert all_treatment_vectors(0).shape == (1, 0)


def test_treatment_vector_validates():
    """Test TreatmentVector only holds 0/1"""
    assert len(TreatmentVector("a", (0, 1, 1))) == 3
    with pytest.raises(NonBinaryTreatmentError):
        TreatmentVector("a", (0, 2))
