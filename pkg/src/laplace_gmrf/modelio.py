"""Model documents (JSON) and data files (CSV).

A model document looks like::

    {
      "schema": 1,
      "families": [{"family": "poisson", "response": "y", "offset": "logE"}],
      "components": [
        {"name": "intercept", "model": "fixed"},
        {"name": "age", "model": "rw2", "covariate": "age", "bin": {"n_bins": 25}},
        {"name": "region", "model": "besag", "index": "area", "graph": "map",
         "constraint": "sum-to-zero"},
        {"name": "u", "model": "iid", "index": "id", "size": 100,
         "hyper": {"log_prec": {"prior": "loggamma", "param": [1, 5e-5]}}}
      ],
      "graphs": {"map": "map.graph"}
    }

Index, replicate and group columns hold 1-based integers; ``NA`` leaves the
row without a contribution from that component.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    BadNumeric,
    MissingGraphFile,
    SchemaError,
    UnknownModelKind,
    UnsupportedFamily,
)
from .latent import (
    KINDS,
    ComponentSpec,
    CopySpec,
    GroupSpec,
    HyperParam,
    LatentModelSpec,
    Prior,
    default_hypers,
    log_precision,
    logit_correlation,
    read_graph,
    validate_graph,
)
from .likelihood import FAMILIES, ObservationModel, _family_label

SCHEMA_VERSION = 1
DEFAULT_BINS = 25
NA = "NA"
SURVIVAL_FAMILIES = ("surv", "survival", "weibull", "exponential", "coxph")

_TOP_KEYS = {"schema", "families", "components", "graphs", "fixed_prior_precision"}
_FAMILY_KEYS = {"family", "response", "ntrials", "offset", "hyper"}
_COMPONENT_KEYS = {
    "name", "model", "index", "covariate", "bin", "size", "hyper", "constraint",
    "replicate", "group", "copy", "scale", "graph",
}
_HYPER_KEYS = {"prior", "param", "initial", "fixed"}


@dataclass(frozen=True)
class FamilyTemplate:
    family: str
    response: str
    ntrials: str | None = None
    offset: str | None = None


@dataclass(frozen=True)
class ComponentData:
    """How one component reads its predictor contributions from the data."""

    name: str
    index: str | None = None
    covariate: str | None = None
    n_bins: int | None = None
    replicate: str | None = None
    group: str | None = None


@dataclass(frozen=True)
class ObservationTemplate:
    """Everything needed to turn a data file into an ``ObservationModel``."""

    families: tuple
    hypers: tuple
    components: tuple

    @property
    def response_columns(self) -> tuple:
        return tuple(f.response for f in self.families)


@dataclass(frozen=True)
class ParsedModel:
    latent: LatentModelSpec
    template: ObservationTemplate


@dataclass(frozen=True)
class LoadedData:
    obs: ObservationModel
    bin_edges: dict = field(default_factory=dict)


def _require(cond, message, path):
    if not cond:
        raise SchemaError(message, path=path)


def _check_keys(obj, allowed, path):
    _require(isinstance(obj, dict), "expected an object", path)
    unknown = sorted(set(obj) - allowed)
    _require(not unknown, f"unknown key(s) {', '.join(map(repr, unknown))}", path)


def _parse_hyper(base: HyperParam, doc, path) -> HyperParam:
    _check_keys(doc, _HYPER_KEYS, path)
    prior = base.prior
    if "prior" in doc or "param" in doc:
        fam = doc.get("prior", prior.family)
        param = doc.get("param", prior.params)
        _require(isinstance(param, list | tuple) and len(param) == 2, "param must be a pair of numbers", f"{path}.param")
        prior = Prior(fam, tuple(float(p) for p in param))
    initial = float(doc.get("initial", base.initial))
    fixed = doc.get("fixed", base.fixed)
    _require(isinstance(fixed, bool), "fixed must be true or false", f"{path}.fixed")
    return HyperParam(base.name, base.transform, prior, initial, fixed)


def _parse_hypers(defaults: tuple, doc, path) -> tuple:
    if doc is None:
        return defaults
    _require(isinstance(doc, dict), "expected an object", path)
    by_suffix = {h.name.rsplit(".", 1)[-1]: h for h in defaults}
    unknown = sorted(set(doc) - set(by_suffix))
    _require(not unknown, f"unknown hyperparameter(s) {', '.join(map(repr, unknown))}; expected {sorted(by_suffix)}", path)
    return tuple(_parse_hyper(h, doc[s], f"{path}.{s}") if s in doc else h for s, h in by_suffix.items())


def _positive_int(v, path):
    _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, "expected a positive integer", path)
    return v


def parse_model_spec(text: str, *, base_dir=None, graph_files=None) -> ParsedModel:
    """Parse and validate a model document.

    Parameters
    ----------
    text : str
        JSON document.
    base_dir : path, optional
        Directory that relative graph paths are resolved against.
    graph_files : mapping, optional
        ``{graph name: path}`` overriding the document's ``graphs`` section.

    Raises
    ------
    SchemaError
        With the path of the offending field; subclasses ``UnknownModelKind``,
        ``MissingGraphFile``, ``UnsupportedFamily`` and ``CycleInCopy``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    _check_keys(doc, _TOP_KEYS, "$")
    _require(doc.get("schema") == SCHEMA_VERSION, f"schema must be {SCHEMA_VERSION}", "schema")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    graphs_doc = doc.get("graphs", {})
    _require(isinstance(graphs_doc, dict), "expected an object", "graphs")
    graph_paths = {k: base_dir / v for k, v in graphs_doc.items()}
    graph_paths.update({k: Path(v) for k, v in (graph_files or {}).items()})

    fams_doc = doc.get("families")
    _require(isinstance(fams_doc, list) and fams_doc, "at least one family is required", "families")
    fam_names = []
    for j, f in enumerate(fams_doc):
        path = f"families[{j}]"
        _check_keys(f, _FAMILY_KEYS, path)
        fam = f.get("family")
        if fam in SURVIVAL_FAMILIES:
            raise UnsupportedFamily(f"survival responses ({fam!r}) are not supported; supported: {', '.join(FAMILIES)}",
                                    path=f"{path}.family")
        if fam not in FAMILIES:
            raise UnsupportedFamily(f"unsupported family {fam!r}; supported: {', '.join(FAMILIES)}", path=f"{path}.family")
        _require(isinstance(f.get("response"), str), "response column name required", f"{path}.response")
        fam_names.append(fam)
    fam_names = tuple(fam_names)
    families, obs_hypers = [], []
    for j, f in enumerate(fams_doc):
        path = f"families[{j}]"
        if f.get("family") == "gaussian":
            base = log_precision(f"{_family_label(fam_names, j)}.log_prec")
            obs_hypers.extend(_parse_hypers((base,), f.get("hyper"), f"{path}.hyper"))
        else:
            _require("hyper" not in f, f"family {f['family']!r} has no hyperparameters", f"{path}.hyper")
        if f["family"] == "binomial":
            _require(isinstance(f.get("ntrials"), str), "binomial family needs an ntrials column", f"{path}.ntrials")
        else:
            _require("ntrials" not in f, "ntrials applies only to the binomial family", f"{path}.ntrials")
        families.append(FamilyTemplate(f["family"], f["response"], f.get("ntrials"), f.get("offset")))
    responses = [f.response for f in families]
    _require(len(set(responses)) == len(responses), "response columns must be distinct", "families")

    comps_doc = doc.get("components")
    _require(isinstance(comps_doc, list) and comps_doc, "at least one component is required", "components")
    components, data_specs = [], []
    by_name = {}
    for k, c in enumerate(comps_doc):
        path = f"components[{k}]"
        _check_keys(c, _COMPONENT_KEYS, path)
        name = c.get("name")
        _require(isinstance(name, str) and name, "component name required", f"{path}.name")
        _require(name not in by_name, f"duplicate component name {name!r}", f"{path}.name")
        path = f"components[{k}]({name})"
        if "copy" in c:
            src = c["copy"]
            _require(isinstance(src, str), "copy must name a component", f"{path}.copy")
            for key in ("model", "hyper", "constraint", "size", "graph", "bin"):
                _require(key not in c, f"{key!r} is taken from the copied component", f"{path}.{key}")
            scale = c.get("scale", 1.0)
            _require(isinstance(scale, int | float) and not isinstance(scale, bool), "scale must be a number", f"{path}.scale")
            _require(isinstance(c.get("index"), str), "copy needs an index column", f"{path}.index")
            source = by_name.get(src)
            kind = source.kind if source is not None else "iid"
            spec = ComponentSpec(name, kind, 1, (), copy_of=CopySpec(src, float(scale)))
            dspec = ComponentData(name, index=c["index"], replicate=_column_ref(c.get("replicate"), f"{path}.replicate"),
                                  group=_column_ref(c.get("group"), f"{path}.group"))
            components.append(spec)
            data_specs.append(dspec)
            by_name[name] = spec
            continue

        kind = c.get("model")
        if kind not in KINDS:
            raise UnknownModelKind(f"unknown model {kind!r}; supported: {', '.join(KINDS)}", path=f"{path}.model")
        _require("scale" not in c, "scale applies only to copies", f"{path}.scale")
        index, covariate, n_bins = c.get("index"), c.get("covariate"), None
        if kind == "fixed":
            _require(index is None, "fixed effects take a covariate column, not an index", f"{path}.index")
            for key in ("bin", "size", "replicate", "group", "constraint", "graph"):
                _require(key not in c, f"{key!r} does not apply to fixed effects", f"{path}.{key}")
            _require(covariate is None or isinstance(covariate, str), "covariate must be a column name", f"{path}.covariate")
            spec = ComponentSpec(name, "fixed", 1)
            components.append(spec)
            data_specs.append(ComponentData(name, covariate=covariate))
            by_name[name] = spec
            continue

        if "bin" in c:
            _require(isinstance(covariate, str) and index is None, "binning needs a covariate column and no index", f"{path}.bin")
            b = c["bin"]
            if b is True:
                n_bins = DEFAULT_BINS
            else:
                _check_keys(b, {"n_bins"}, f"{path}.bin")
                n_bins = _positive_int(b.get("n_bins", DEFAULT_BINS), f"{path}.bin.n_bins")
            _require(n_bins >= 2, "at least two bins are needed", f"{path}.bin.n_bins")
        else:
            _require(covariate is None, "covariate applies to fixed effects or binned components", f"{path}.covariate")
            _require(isinstance(index, str), "index column required", f"{path}.index")

        graph = None
        if kind == "besag":
            gname = c.get("graph")
            _require(isinstance(gname, str), "besag needs a graph name", f"{path}.graph")
            gpath = graph_paths.get(gname)
            if gpath is None or not os.path.isfile(gpath):
                raise MissingGraphFile(f"graph {gname!r} not found" + (f" at {gpath}" if gpath else ""), path=f"{path}.graph")
            graph = tuple(tuple(r) for r in validate_graph(read_graph(gpath)))
            size = len(graph)
            if "size" in c:
                _require(c["size"] == size, f"size {c['size']} does not match the graph ({size} nodes)", f"{path}.size")
        else:
            _require("graph" not in c, "graph applies only to besag", f"{path}.graph")
            size = n_bins if n_bins is not None else _positive_int(c.get("size"), f"{path}.size")
            if n_bins is not None and "size" in c:
                _require(c["size"] == n_bins, "size must equal n_bins when binning", f"{path}.size")

        hypers = _parse_hypers(default_hypers(name, kind), c.get("hyper"), f"{path}.hyper")
        rep_col, n_rep = None, 1
        if "replicate" in c:
            r = c["replicate"]
            _check_keys(r, {"column", "n"}, f"{path}.replicate")
            rep_col = _column_ref(r.get("column"), f"{path}.replicate.column")
            n_rep = _positive_int(r.get("n"), f"{path}.replicate.n")
        group, grp_col = None, None
        if "group" in c:
            g = c["group"]
            _check_keys(g, {"column", "size", "model", "hyper"}, f"{path}.group")
            grp_col = _column_ref(g.get("column"), f"{path}.group.column")
            gmodel = g.get("model", "ar1")
            if gmodel != "ar1":
                raise UnknownModelKind(f"unknown group model {gmodel!r}; supported: ar1", path=f"{path}.group.model")
            (gh,) = _parse_hypers((logit_correlation(f"{name}.group_logit_rho"),), g.get("hyper"), f"{path}.group.hyper")
            group = GroupSpec(_positive_int(g.get("size"), f"{path}.group.size"), "ar1", gh)
        constraint = c.get("constraint", "none")
        _require(constraint in ("none", "sum-to-zero"), "constraint must be 'none' or 'sum-to-zero'", f"{path}.constraint")
        spec = ComponentSpec(name, kind, size, hypers, constraint, n_rep, None, group, graph)
        components.append(spec)
        data_specs.append(ComponentData(name, index=index, covariate=covariate if n_bins else None, n_bins=n_bins,
                                        replicate=rep_col, group=grp_col))
        by_name[name] = spec

    fpp = doc.get("fixed_prior_precision", 1e-3)
    _require(isinstance(fpp, int | float) and fpp > 0, "must be a positive number", "fixed_prior_precision")
    latent = LatentModelSpec(tuple(components), float(fpp))
    template = ObservationTemplate(tuple(families), tuple(obs_hypers), tuple(data_specs))
    return ParsedModel(latent, template)


def _column_ref(v, path):
    if v is None:
        return None
    _require(isinstance(v, str) and v, "expected a column name", path)
    return v


# --------------------------------------------------------------------------
# data


def read_csv(path) -> tuple:
    """Header and rows of a comma-separated file (strings, UTF-8)."""
    if not os.path.isfile(path):
        raise SchemaError(f"data file not found: {path}", path="data_file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("data file is empty", path="data_file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header", path="data_file")
    body = rows[1:]
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise BadNumeric(f"expected {len(header)} fields, found {len(r)}", row=i)
    return header, body


def _numeric_column(header, body, name) -> np.ndarray:
    if name not in header:
        raise SchemaError(f"column {name!r} not in data file", path="data_file")
    j = header.index(name)
    out = np.empty(len(body))
    for i, r in enumerate(body):
        s = r[j].strip()
        if s == NA or s == "":
            out[i] = np.nan
            continue
        try:
            out[i] = float(s)
        except ValueError:
            raise BadNumeric(f"cannot parse {s!r} as a number", row=i + 1, column=name) from None
        if not math.isfinite(out[i]):
            raise BadNumeric(f"non-finite value {s!r}", row=i + 1, column=name)
    return out


def _index_column(header, body, name, upper, what) -> np.ndarray:
    v = _numeric_column(header, body, name)
    ok = ~np.isnan(v)
    bad = ok & ((v != np.floor(v)) | (v < 1) | (v > upper))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise BadNumeric(f"{what} must be an integer in 1..{upper}, got {v[i]!r}", row=i + 1, column=name)
    return v


def bin_covariate(values, n_bins: int) -> tuple:
    """Equal-width bins over the observed range; returns (1-based bin, edges)."""
    obs = values[~np.isnan(values)]
    if obs.size == 0:
        raise SchemaError("cannot bin a covariate with no observed values")
    lo, hi = float(obs.min()), float(obs.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right"), 1, n_bins).astype(float)
    idx[np.isnan(values)] = np.nan
    return idx, edges


def load_data(csv_path, parsed: ParsedModel) -> LoadedData:
    """Build the observation model from a CSV file.

    Raises
    ------
    BadNumeric
        Unparseable or out-of-range values, with 1-based data row and column.
    ResponseOverlap
        A row with more than one observed response.
    """
    header, body = read_csv(csv_path)
    N = len(body)
    tmpl = parsed.template
    latent = parsed.latent
    Y = np.column_stack([_numeric_column(header, body, f.response) for f in tmpl.families]) if N else np.zeros((0, len(tmpl.families)))
    ntrials = None
    if any(f.ntrials for f in tmpl.families):
        ntrials = np.ones(N)
    offset = np.zeros(N)
    for j, f in enumerate(tmpl.families):
        rows = ~np.isnan(Y[:, j])
        if f.ntrials:
            nt = _numeric_column(header, body, f.ntrials)
            miss = rows & np.isnan(nt)
            if miss.any():
                raise BadNumeric("ntrials missing for an observed binomial response", row=int(np.flatnonzero(miss)[0]) + 1, column=f.ntrials)
            ntrials[rows] = nt[rows]
        if f.offset:
            off = _numeric_column(header, body, f.offset)
            off = np.where(np.isnan(off), 0.0, off)
            offset[rows] = off[rows]

    spec_by_name = {c.name: c for c in latent.components}
    rows_i, cols_i, vals = [], [], []
    bin_edges = {}
    for d in tmpl.components:
        c = spec_by_name[d.name]
        if c.kind == "fixed" and c.copy_of is None:
            col = latent.index_map[c.name].start
            v = np.ones(N) if d.covariate is None else _numeric_column(header, body, d.covariate)
            ok = ~np.isnan(v)
            rows_i.append(np.flatnonzero(ok))
            cols_i.append(np.full(ok.sum(), col))
            vals.append(v[ok])
            continue
        target, weight = c, 1.0
        while target.copy_of is not None:
            weight *= target.copy_of.scale
            target = spec_by_name[target.copy_of.source]
        if d.n_bins is not None:
            idx, edges = bin_covariate(_numeric_column(header, body, d.covariate), d.n_bins)
            bin_edges[d.name] = edges.tolist()
        else:
            idx = _index_column(header, body, d.index, target.size, "index")
        rep = np.ones(N) if d.replicate is None else _index_column(header, body, d.replicate, target.replicate, "replicate")
        grp = np.ones(N) if d.group is None else _index_column(header, body, d.group, target.n_group, "group")
        ok = ~(np.isnan(idx) | np.isnan(rep) | np.isnan(grp))
        pos = (latent.index_map[target.name].start
               + ((rep[ok] - 1) * target.n_group + (grp[ok] - 1)) * target.size + (idx[ok] - 1)).astype(np.int64)
        rows_i.append(np.flatnonzero(ok))
        cols_i.append(pos)
        vals.append(np.full(ok.sum(), weight))
    A = sp.csr_matrix(
        (np.concatenate(vals) if vals else [], (np.concatenate(rows_i) if rows_i else [], np.concatenate(cols_i) if cols_i else [])),
        shape=(N, latent.total_dim),
    )
    A.sum_duplicates()
    obs = ObservationModel(tuple(f.family for f in tmpl.families), Y, A, ntrials, offset, tmpl.hypers)
    return LoadedData(obs, bin_edges)
