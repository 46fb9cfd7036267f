"""Latent Gaussian field components and their joint prior precision.

Each component contributes a block to a block-diagonal precision matrix:
fixed effects get a vague diagonal prior, random components get a structure
matrix scaled by their precision, optionally expanded by a temporal AR(1)
``group`` (Kronecker product) and by ``replicate`` copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.special import gammaln

from .errors import (
    AsymmetricGraph,
    CycleInCopy,
    InvalidCorrelation,
    SchemaError,
    SelfLoop,
    SizeTooSmall,
    UnknownHyperSlot,
    UnknownModelKind,
)
from .gmrf import SparsePrecision

KINDS = ("fixed", "iid", "rw1", "rw2", "besag", "ar1")
INTRINSIC = ("rw1", "rw2", "besag")
#: added to the diagonal of intrinsic structure matrices
JITTER = 1e-5
DEFAULT_FIXED_PRECISION = 1e-3


# --------------------------------------------------------------------------
# structure matrices


def structure_rw1(n: int) -> SparsePrecision:
    """First-order random walk structure ``D^T D``."""
    if n < 2:
        raise SizeTooSmall(f"rw1 needs n >= 2, got {n}")
    D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    return SparsePrecision(sp.tril(D.T @ D, format="csc"))


def structure_rw2(n: int) -> SparsePrecision:
    """Second-order random walk structure ``D^T D`` with second differences."""
    if n < 3:
        raise SizeTooSmall(f"rw2 needs n >= 3, got {n}")
    D = sp.diags([np.ones(n - 2), -2.0 * np.ones(n - 2), np.ones(n - 2)], [0, 1, 2], shape=(n - 2, n))
    return SparsePrecision(sp.tril(D.T @ D, format="csc"))


def validate_graph(graph: Sequence[Sequence[int]]) -> list[list[int]]:
    """Check a 0-based adjacency list; returns it with sorted neighbour lists."""
    n = len(graph)
    if n < 2:
        raise SizeTooSmall(f"besag graph needs at least 2 nodes, got {n}")
    nbrs = [sorted(int(j) for j in row) for row in graph]
    sets = [set(row) for row in nbrs]
    for i, row in enumerate(nbrs):
        for j in row:
            if j == i:
                raise SelfLoop(f"node {i + 1} lists itself as a neighbour")
            if not 0 <= j < n:
                raise AsymmetricGraph(f"node {i + 1} has neighbour {j + 1} outside 1..{n}")
            if i not in sets[j]:
                raise AsymmetricGraph(f"edge {i + 1}-{j + 1} is not listed by node {j + 1}")
    return nbrs


def graph_adjacency(graph) -> sp.csr_matrix:
    nbrs = validate_graph(graph)
    n = len(nbrs)
    rows = np.repeat(np.arange(n), [len(r) for r in nbrs])
    cols = np.fromiter((j for r in nbrs for j in r), dtype=np.int64, count=len(rows))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def structure_besag(graph) -> SparsePrecision:
    """Besag (intrinsic CAR) structure: degree matrix minus adjacency."""
    W = graph_adjacency(graph)
    deg = np.asarray(W.sum(axis=1)).ravel()
    return SparsePrecision(sp.tril(sp.diags(deg) - W, format="csc"))


def n_connected(graph) -> int:
    return int(connected_components(graph_adjacency(graph), directed=False)[0])


def structure_ar1(n: int, phi: float) -> SparsePrecision:
    """Precision of a stationary AR(1) with unit marginal variance."""
    if not abs(phi) < 1.0:
        raise InvalidCorrelation(f"AR(1) needs |phi| < 1, got {phi}")
    if n < 1:
        raise SizeTooSmall(f"ar1 needs n >= 1, got {n}")
    if n == 1:
        return SparsePrecision.identity(1)
    d = np.full(n, 1.0 + phi * phi)
    d[0] = d[-1] = 1.0
    off = np.full(n - 1, -phi)
    M = sp.diags([off, d], [-1, 0], shape=(n, n), format="csc") / (1.0 - phi * phi)
    return SparsePrecision(M.tocsc())


def ar1_logdet(n: int, phi: float) -> float:
    """``log det`` of :func:`structure_ar1`; closed form ``-(n-1) log(1 - phi^2)``."""
    return -(n - 1) * math.log1p(-phi * phi)


def kronecker(Qa: SparsePrecision, Qb: SparsePrecision) -> SparsePrecision:
    """``Qa (x) Qb``: block ``(i, j)`` equals ``Qa[i, j] * Qb``."""
    K = sp.kron(Qa.full(), Qb.full(), format="csc")
    return SparsePrecision(sp.tril(K, format="csc"))


# --------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class Prior:
    """Prior on the internal (unconstrained) scale of a hyperparameter.

    ``loggamma``: the natural-scale value ``exp(theta)`` is Gamma(shape, rate);
    the density is for ``theta`` and includes the Jacobian.
    ``normal``: ``theta ~ N(mean, 1/precision)``.
    """

    family: str = "loggamma"
    params: tuple = (1.0, 5e-5)

    def __post_init__(self):
        if self.family not in ("loggamma", "normal"):
            raise SchemaError(f"unknown prior family {self.family!r}")
        if len(self.params) != 2 or self.params[1] <= 0 or (self.family == "loggamma" and self.params[0] <= 0):
            raise SchemaError(f"bad parameters {self.params!r} for prior {self.family!r}")

    def logpdf(self, theta: float) -> float:
        a, b = self.params
        if self.family == "loggamma":
            return a * math.log(b) - gammaln(a) + a * theta - b * math.exp(theta)
        return 0.5 * math.log(b / (2.0 * math.pi)) - 0.5 * b * (theta - a) ** 2


TRANSFORMS = ("log-precision", "logit-correlation-scaled")


@dataclass(frozen=True)
class HyperParam:
    name: str
    transform: str = "log-precision"
    prior: Prior = field(default_factory=Prior)
    initial: float = 4.0
    fixed: bool = False

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise SchemaError(f"unknown transform {self.transform!r}", path=self.name)

    @property
    def natural_name(self) -> str:
        stem = self.name.rsplit(".", 1)[0]
        if self.transform == "log-precision":
            return f"{stem}.precision"
        return f"{stem}.{'group_rho' if self.name.endswith('group_logit_rho') else 'rho'}"

    def to_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.transform == "log-precision":
            return np.exp(theta)
        return np.tanh(0.5 * theta)  # 2 / (1 + exp(-theta)) - 1

    def from_natural(self, value):
        value = np.asarray(value, dtype=float)
        if self.transform == "log-precision":
            return np.log(value)
        return 2.0 * np.arctanh(value)

    def log_jacobian(self, theta):
        """``log |d natural / d theta|``."""
        theta = np.asarray(theta, dtype=float)
        if self.transform == "log-precision":
            return theta
        rho = np.tanh(0.5 * theta)
        return np.log(0.5 * (1.0 - rho * rho))


def log_precision(name: str, prior: Prior | None = None, initial: float = 4.0, fixed: bool = False) -> HyperParam:
    return HyperParam(name, "log-precision", prior or Prior(), initial, fixed)


def logit_correlation(name: str, prior: Prior | None = None, initial: float = 0.0, fixed: bool = False) -> HyperParam:
    return HyperParam(name, "logit-correlation-scaled", prior or Prior("normal", (0.0, 1.0)), initial, fixed)


# --------------------------------------------------------------------------
# component specs


@dataclass(frozen=True)
class CopySpec:
    source: str
    scale: float = 1.0


@dataclass(frozen=True)
class GroupSpec:
    size: int
    model: str = "ar1"
    hyper: HyperParam | None = None


@dataclass(frozen=True)
class ComponentSpec:
    """One latent component.

    ``size`` is the length of one base field; the component owns
    ``size * group.size * replicate`` latent variables, laid out replicate-major,
    then group, then base index. A component with ``copy_of`` owns none.
    """

    name: str
    kind: str
    size: int = 1
    hyper: tuple = ()
    constraint: str = "none"
    replicate: int = 1
    copy_of: CopySpec | None = None
    group: GroupSpec | None = None
    graph: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnknownModelKind(f"unknown model kind {self.kind!r}", path=self.name)
        if self.size < 1:
            raise SizeTooSmall(f"component {self.name!r} needs size >= 1")
        if self.replicate < 1:
            raise SizeTooSmall(f"component {self.name!r} needs replicate >= 1")
        if self.constraint not in ("none", "sum-to-zero"):
            raise SchemaError(f"unknown constraint {self.constraint!r}", path=self.name)
        if self.kind == "fixed" and (self.constraint != "none" or self.group or self.replicate != 1):
            raise SchemaError("fixed effects take no constraint, group or replicate", path=self.name)
        if self.group is not None:
            if self.group.model != "ar1":
                raise UnknownModelKind(f"group model {self.group.model!r} not supported (only ar1)", path=self.name)
            if self.group.size < 1:
                raise SizeTooSmall(f"group size must be >= 1 in {self.name!r}")
        if self.kind == "besag" and self.graph is None and self.copy_of is None:
            raise SchemaError("besag component needs a graph", path=self.name)
        if self.kind == "besag" and self.graph is not None and len(self.graph) != self.size:
            raise SchemaError(f"graph has {len(self.graph)} nodes but size is {self.size}", path=self.name)

    @property
    def n_group(self) -> int:
        return 1 if self.group is None else self.group.size

    @property
    def block_dim(self) -> int:
        """Latent dimension of one replicate."""
        return self.size * self.n_group

    @property
    def dim(self) -> int:
        return 0 if self.copy_of is not None else self.block_dim * self.replicate

    def all_hypers(self) -> tuple:
        if self.copy_of is not None:
            return ()
        hs = tuple(self.hyper)
        if self.group is not None and self.group.hyper is not None:
            hs = hs + (self.group.hyper,)
        return hs

    def null_dim(self) -> int:
        """Dimension of the structure matrix null space (one base field)."""
        if self.kind == "rw1":
            return 1
        if self.kind == "rw2":
            return 2
        if self.kind == "besag":
            return n_connected(self.graph)
        return 0


def default_hypers(name: str, kind: str) -> tuple:
    if kind == "fixed":
        return ()
    hs = (log_precision(f"{name}.log_prec"),)
    if kind == "ar1":
        hs = hs + (logit_correlation(f"{name}.logit_rho"),)
    return hs


def make_component(name: str, kind: str, size: int = 1, **kw) -> ComponentSpec:
    """Convenience constructor filling in default hyperparameters."""
    if kind not in KINDS:
        raise UnknownModelKind(f"unknown model kind {kind!r}", path=name)
    hyper = kw.pop("hyper", None)
    if hyper is None:
        hyper = default_hypers(name, kind) if kw.get("copy_of") is None else ()
    group = kw.pop("group", None)
    if isinstance(group, int):
        group = GroupSpec(group, "ar1", logit_correlation(f"{name}.group_logit_rho"))
    graph = kw.pop("graph", None)
    if graph is not None:
        graph = tuple(tuple(r) for r in validate_graph(graph))
        if kind == "besag":
            size = len(graph)
    return ComponentSpec(name, kind, size, tuple(hyper), group=group, graph=graph, **kw)


@dataclass(frozen=True)
class LatentModelSpec:
    components: tuple
    fixed_prior_precision: float = DEFAULT_FIXED_PRECISION
    index_map: dict = field(init=False, compare=False)
    total_dim: int = field(init=False, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        names = [c.name for c in comps]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate component names")
        _check_copies(comps)
        start = 0
        index_map = {}
        for c in comps:
            if c.copy_of is None:
                index_map[c.name] = range(start, start + c.dim)
                start += c.dim
        object.__setattr__(self, "index_map", index_map)
        object.__setattr__(self, "total_dim", start)
        hnames = [h.name for h in self.hypers]
        if len(set(hnames)) != len(hnames):
            raise SchemaError("duplicate hyperparameter names")
        if start < 1:
            raise SchemaError("latent field is empty")

    def component(self, name: str) -> ComponentSpec:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def hypers(self) -> tuple:
        return tuple(h for c in self.components for h in c.all_hypers())

    @property
    def free_hypers(self) -> tuple:
        return tuple(h for h in self.hypers if not h.fixed)

    def resolve_theta(self, theta) -> dict:
        """Map a free-slot vector (or a name mapping) to values for every slot."""
        return resolve_theta(self.hypers, theta)

    def constraint_matrix(self) -> np.ndarray | None:
        """One sum-to-zero row per (replicate, group) slice of constrained components."""
        rows = []
        for c in self.components:
            if c.copy_of is not None or c.constraint != "sum-to-zero":
                continue
            base = self.index_map[c.name].start
            for s in range(c.replicate * c.n_group):
                r = np.zeros(self.total_dim)
                r[base + s * c.size: base + (s + 1) * c.size] = 1.0
                rows.append(r)
        return np.vstack(rows) if rows else None


def resolve_theta(hypers: Sequence[HyperParam], theta) -> dict:
    free = [h for h in hypers if not h.fixed]
    values = {h.name: float(h.initial) for h in hypers}
    if theta is None:
        theta = {}
    if isinstance(theta, Mapping):
        for k, v in theta.items():
            if k not in values:
                raise UnknownHyperSlot(f"unknown hyperparameter {k!r}")
            values[k] = float(v)
        return values
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (len(free),):
        raise UnknownHyperSlot(f"theta has {theta.size} entries but there are {len(free)} free hyperparameter slots")
    for h, v in zip(free, theta):
        values[h.name] = float(v)
    return values


def _check_copies(comps) -> None:
    by_name = {c.name: c for c in comps}
    for c in comps:
        seen = [c.name]
        cur = c
        while cur.copy_of is not None:
            src = cur.copy_of.source
            if src in seen:
                raise CycleInCopy(f"copy cycle: {' -> '.join(seen + [src])}", path=c.name)
            if src not in by_name:
                raise SchemaError(f"copy source {src!r} does not exist", path=c.name)
            seen.append(src)
            cur = by_name[src]
    order = {c.name: i for i, c in enumerate(comps)}
    for c in comps:
        if c.copy_of is not None and order[c.copy_of.source] > order[c.name]:
            raise SchemaError(f"copy source {c.copy_of.source!r} must precede {c.name!r}", path=c.name)


# --------------------------------------------------------------------------
# assembly


def _component_block(c: ComponentSpec, values: dict):
    """One-replicate precision block and its logdet correction."""
    if c.kind == "fixed":
        raise AssertionError("fixed effects handled by caller")
    tau = math.exp(values[c.hyper[0].name])
    if c.kind == "iid":
        base = SparsePrecision.identity(c.size)
    elif c.kind == "rw1":
        base = structure_rw1(c.size).add_diagonal(JITTER)
    elif c.kind == "rw2":
        base = structure_rw2(c.size).add_diagonal(JITTER)
    elif c.kind == "besag":
        base = structure_besag(c.graph).add_diagonal(JITTER)
    elif c.kind == "ar1":
        phi = float(c.hyper[1].to_natural(values[c.hyper[1].name]))
        base = structure_ar1(c.size, phi)
    else:
        raise UnknownModelKind(c.kind)
    block = base.scaled(tau)
    # jittered null-space directions carry tau (and the group AR(1) spectrum)
    # that the intrinsic density does not; remove them unless a constraint does
    n_free_null = c.null_dim() - (1 if c.constraint == "sum-to-zero" and c.null_dim() > 0 else 0)
    corr = 0.0
    if c.group is not None:
        g = c.group.size
        phi_g = float(c.group.hyper.to_natural(values[c.group.hyper.name]))
        block = kronecker(structure_ar1(g, phi_g), block)
        if n_free_null:
            corr = -n_free_null * (g * math.log(tau) + ar1_logdet(g, phi_g))
    elif n_free_null:
        corr = -n_free_null * math.log(tau)
    return block, corr


def assemble_prior(spec: LatentModelSpec, theta):
    """Joint prior precision, mean and intrinsic logdet correction.

    Parameters
    ----------
    spec : LatentModelSpec
    theta : array_like or mapping
        Values of the free hyperparameter slots in ``spec.free_hypers`` order,
        or a ``{name: value}`` mapping (unlisted slots take their initial value).

    Returns
    -------
    Q : SparsePrecision
    mean : ndarray
        Always zero.
    logdet_correction : float
        Add to ``log det Q`` to get the (pseudo-)determinant the intrinsic
        components should contribute, up to a theta-free constant.
    """
    values = spec.resolve_theta(theta)
    blocks = []
    correction = 0.0
    for c in spec.components:
        if c.copy_of is not None:
            continue
        if c.kind == "fixed":
            blocks.append(sp.identity(c.size, format="csc") * spec.fixed_prior_precision)
            continue
        block, corr = _component_block(c, values)
        if c.replicate > 1:
            blocks.append(sp.kron(sp.identity(c.replicate), block.lower, format="csc"))
        else:
            blocks.append(block.lower)
        correction += c.replicate * corr
    Q = SparsePrecision(sp.block_diag(blocks, format="csc"))
    return Q, np.zeros(spec.total_dim), correction


def log_prior_theta(hypers: Sequence[HyperParam], values: Mapping[str, float]) -> float:
    return float(sum(h.prior.logpdf(values[h.name]) for h in hypers if not h.fixed))


@dataclass(frozen=True)
class CopyAugmentation:
    """Predictor-slot mapping of one copy component onto its source's latent indices."""

    name: str
    source: str
    columns: np.ndarray
    weight: float


def copy_extension(spec: LatentModelSpec) -> dict:
    """For each copy component, the latent columns and weight it adds to ``A``.

    Copies of copies resolve to the original source with multiplied scales.
    """
    out = {}
    by_name = {c.name: c for c in spec.components}
    for c in spec.components:
        if c.copy_of is None:
            continue
        weight = 1.0
        cur = c
        seen = {c.name}
        while cur.copy_of is not None:
            weight *= cur.copy_of.scale
            nxt = cur.copy_of.source
            if nxt in seen:
                raise CycleInCopy(f"copy cycle through {nxt!r}", path=c.name)
            seen.add(nxt)
            cur = by_name[nxt]
        cols = np.asarray(spec.index_map[cur.name], dtype=np.int64)
        out[c.name] = CopyAugmentation(c.name, cur.name, cols, weight)
    return out


# --------------------------------------------------------------------------
# graph files


def parse_graph(text: str) -> list[list[int]]:
    """Parse the graph-file format into a 0-based adjacency list.

    Line 1 holds the node count ``N``; each following line is
    ``<id> <k> <j1> ... <jk>`` with 1-based ids.
    """
    tokens = [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not tokens:
        raise SchemaError("empty graph file")
    try:
        n = int(tokens[0][0])
    except ValueError as exc:
        raise SchemaError("first line of a graph file must be the node count") from exc
    if len(tokens) - 1 != n:
        raise SchemaError(f"graph declares {n} nodes but has {len(tokens) - 1} node lines")
    graph: list = [None] * n
    for line in tokens[1:]:
        try:
            ids = [int(t) for t in line]
        except ValueError as exc:
            raise SchemaError(f"non-integer entry in graph line {' '.join(line)!r}") from exc
        node, k, nbrs = ids[0], ids[1], ids[2:]
        if len(nbrs) != k:
            raise SchemaError(f"node {node} declares {k} neighbours but lists {len(nbrs)}")
        if not 1 <= node <= n or graph[node - 1] is not None:
            raise SchemaError(f"bad or repeated node id {node}")
        graph[node - 1] = [j - 1 for j in nbrs]
    validate_graph(graph)
    return graph


def read_graph(path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def format_graph(graph) -> str:
    lines = [str(len(graph))]
    for i, row in enumerate(graph):
        lines.append(" ".join(str(v) for v in [i + 1, len(row), *[j + 1 for j in row]]))
    return "\n".join(lines) + "\n"
