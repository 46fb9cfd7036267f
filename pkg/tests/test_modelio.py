import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DATA
from laplace_gmrf.errors import (
    BadNumeric,
    CycleInCopy,
    MissingGraphFile,
    ResponseOverlap,
    SchemaError,
    UnknownModelKind,
    UnsupportedFamily,
)
from laplace_gmrf.latent import format_graph
from laplace_gmrf.modelio import bin_covariate, load_data, parse_model_spec


def doc(components, families=None, **extra):
    return json.dumps({"schema": 1, "families": families or [{"family": "poisson", "response": "y"}],
                       "components": components, **extra})


def write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


class TestParseModelSpec:
    def test_minimal(self):
        parsed = parse_model_spec(doc([{"name": "intercept", "model": "fixed"}]))
        assert parsed.latent.total_dim == 1
        assert parsed.latent.hypers == ()

    def test_failure_demo_dimension(self):
        parsed = parse_model_spec((DATA / "failure_demo" / "model.json").read_text())
        assert parsed.latent.total_dim == 101
        assert [h.name for h in parsed.latent.hypers] == ["num.log_prec"]

    def test_hyper_overrides(self):
        parsed = parse_model_spec(doc([{"name": "u", "model": "iid", "index": "id", "size": 4,
                                        "hyper": {"log_prec": {"prior": "loggamma", "param": [2, 3], "initial": 1.5}}}]))
        (h,) = parsed.latent.hypers
        assert h.prior.params == (2.0, 3.0) and h.initial == 1.5 and not h.fixed

    def test_gaussian_family_hyper(self):
        parsed = parse_model_spec(doc([{"name": "b", "model": "fixed"}], [{"family": "gaussian", "response": "y"}]))
        assert [h.name for h in parsed.template.hypers] == ["gaussian.log_prec"]

    def test_copy_cycle(self):
        comps = [{"name": "a", "copy": "b", "index": "i"}, {"name": "b", "copy": "a", "index": "i"}]
        with pytest.raises(CycleInCopy):
            parse_model_spec(doc(comps))

    def test_unknown_key_reports_path(self):
        with pytest.raises(SchemaError) as info:
            parse_model_spec(doc([{"name": "u", "model": "iid", "index": "id", "size": 2, "sise": 3}]))
        assert info.value.path == "components[0]"
        assert "sise" in str(info.value)

    def test_unknown_model_kind(self):
        with pytest.raises(UnknownModelKind) as info:
            parse_model_spec(doc([{"name": "u", "model": "spde", "index": "id", "size": 2}]))
        assert info.value.path == "components[0](u).model"

    def test_unsupported_family(self):
        with pytest.raises(UnsupportedFamily):
            parse_model_spec(doc([{"name": "b", "model": "fixed"}], [{"family": "weibull", "response": "y"}]))

    @pytest.mark.parametrize("family", ["surv", "weibull"])
    def test_survival_family(self, family):
        with pytest.raises(UnsupportedFamily, match="survival") as info:
            parse_model_spec(doc([{"name": "b", "model": "fixed"}], [{"family": family, "response": "t"}]))
        assert info.value.path == "families[0].family"

    def test_schema_version(self):
        with pytest.raises(SchemaError):
            parse_model_spec(json.dumps({"schema": 2, "families": [], "components": []}))

    def test_invalid_json(self):
        with pytest.raises(SchemaError):
            parse_model_spec("{not json")

    def test_besag_graph(self, tmp_path):
        (tmp_path / "chain.graph").write_text(format_graph([[1], [0, 2], [1]]))
        text = doc([{"name": "s", "model": "besag", "index": "r", "graph": "chain"}], graphs={"chain": "chain.graph"})
        parsed = parse_model_spec(text, base_dir=tmp_path)
        assert parsed.latent.total_dim == 3

    def test_missing_graph(self, tmp_path):
        text = doc([{"name": "s", "model": "besag", "index": "r", "graph": "chain"}])
        with pytest.raises(MissingGraphFile) as info:
            parse_model_spec(text, base_dir=tmp_path)
        assert info.value.path.endswith(".graph")

    def test_graph_override(self, tmp_path):
        (tmp_path / "other.graph").write_text(format_graph([[1], [0]]))
        text = doc([{"name": "s", "model": "besag", "index": "r", "graph": "g"}], graphs={"g": "absent.graph"})
        parsed = parse_model_spec(text, base_dir=tmp_path, graph_files={"g": tmp_path / "other.graph"})
        assert parsed.latent.total_dim == 2


class TestLoadData:
    def test_identity_design_roundtrip(self, tmp_path):
        parsed = parse_model_spec(doc([{"name": "u", "model": "iid", "index": "id", "size": 3}]))
        data = load_data(write_csv(tmp_path / "d.csv", ["y", "id"], [(4, 1), (0, 2), (7, 3)]), parsed)
        np.testing.assert_array_equal(data.obs.A.toarray(), np.eye(3))
        np.testing.assert_array_equal(data.obs.y_matrix[:, 0], [4, 0, 7])

    def test_covariate_and_offset(self, tmp_path):
        fams = [{"family": "poisson", "response": "y", "offset": "logE"}]
        parsed = parse_model_spec(doc([{"name": "b0", "model": "fixed"}, {"name": "b1", "model": "fixed", "covariate": "x"}], fams))
        data = load_data(write_csv(tmp_path / "d.csv", ["y", "x", "logE"], [(1, 0.5, 0.1), (2, -1.0, 0.2)]), parsed)
        np.testing.assert_array_equal(data.obs.A.toarray(), [[1.0, 0.5], [1.0, -1.0]])
        np.testing.assert_array_equal(data.obs.offset, [0.1, 0.2])

    def test_disjoint_missing_pattern_loads(self, tmp_path):
        fams = [{"family": "gaussian", "response": "y1"}, {"family": "poisson", "response": "y2"}]
        parsed = parse_model_spec(doc([{"name": "b0", "model": "fixed"}], fams))
        data = load_data(write_csv(tmp_path / "d.csv", ["y1", "y2"], [(0.5, "NA"), ("NA", 3), ("", "")]), parsed)
        assert data.obs.column.tolist() == [0, 1, -1]

    def test_overlapping_responses_rejected(self, tmp_path):
        fams = [{"family": "gaussian", "response": "y1"}, {"family": "poisson", "response": "y2"}]
        parsed = parse_model_spec(doc([{"name": "b0", "model": "fixed"}], fams))
        with pytest.raises(ResponseOverlap):
            load_data(write_csv(tmp_path / "d.csv", ["y1", "y2"], [(0.5, 2)]), parsed)

    def test_bad_numeric_reports_row_and_column(self, tmp_path):
        parsed = parse_model_spec(doc([{"name": "b0", "model": "fixed"}]))
        with pytest.raises(BadNumeric) as info:
            load_data(write_csv(tmp_path / "d.csv", ["y"], [(1,), ("two",)]), parsed)
        assert info.value.row == 2 and info.value.column == "y"

    def test_index_out_of_range(self, tmp_path):
        parsed = parse_model_spec(doc([{"name": "u", "model": "iid", "index": "id", "size": 2}]))
        with pytest.raises(BadNumeric) as info:
            load_data(write_csv(tmp_path / "d.csv", ["y", "id"], [(1, 1), (1, 3)]), parsed)
        assert info.value.row == 2

    def test_missing_column(self, tmp_path):
        parsed = parse_model_spec(doc([{"name": "u", "model": "iid", "index": "id", "size": 2}]))
        with pytest.raises(SchemaError):
            load_data(write_csv(tmp_path / "d.csv", ["y"], [(1,)]), parsed)

    def test_missing_file(self, tmp_path):
        parsed = parse_model_spec(doc([{"name": "b0", "model": "fixed"}]))
        with pytest.raises(SchemaError) as info:
            load_data(tmp_path / "absent.csv", parsed)
        assert info.value.path == "data_file"

    def test_replicates_and_copies(self, tmp_path):
        comps = [{"name": "u", "model": "iid", "index": "id", "size": 2, "replicate": {"column": "rep", "n": 2}},
                 {"name": "v", "copy": "u", "index": "id", "replicate": "rep", "scale": -2.0}]
        parsed = parse_model_spec(doc(comps))
        data = load_data(write_csv(tmp_path / "d.csv", ["y", "id", "rep"], [(1, 2, 1), (3, 1, 2)]), parsed)
        # replicate-major layout; the copy adds its scaled weight onto the source column
        np.testing.assert_array_equal(data.obs.A.toarray(), [[0, -1.0, 0, 0], [0, 0, -1.0, 0]])

    def test_binned_covariate(self, tmp_path):
        comps = [{"name": "s", "model": "rw1", "covariate": "age", "bin": {"n_bins": 4}}]
        parsed = parse_model_spec(doc(comps))
        data = load_data(write_csv(tmp_path / "d.csv", ["y", "age"], [(1, 0.0), (1, 2.5), (1, 10.0)]), parsed)
        np.testing.assert_array_equal(data.obs.A.toarray(), [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1]])
        assert data.bin_edges["s"] == [0.0, 2.5, 5.0, 7.5, 10.0]


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.integers(2, 30))
def test_bins_cover_every_value(values, n_bins):
    idx, edges = bin_covariate(np.array(values), n_bins)
    assert idx.min() >= 1 and idx.max() <= n_bins
    assert len(edges) == n_bins + 1
    for v, k in zip(values, idx.astype(int)):
        assert edges[k - 1] <= v <= edges[k]
