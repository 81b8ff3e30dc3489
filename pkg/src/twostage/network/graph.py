"""School friendship networks: containers, CSV input/output and a synthetic generator.

Each group ``r`` holds a directed 0/1 adjacency ``G_r`` without self-links,
covariates ``X_r`` and an outcome ``y_r``.  The row-normalized matrix divides
every row by the number of friends; isolates keep a zero row, so their
average-friend terms are zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from ..rng import DATA, as_stream

SYNTHETIC_GROUPS = 16
SYNTHETIC_NODES = 2735
SYNTHETIC_COVARIATES = 25
SYNTHETIC_THETA1 = 0.4
SYNTHETIC_SEED = 2735


def row_normalize(G: np.ndarray) -> np.ndarray:
    """``G / rowsum`` with zero rows left at zero."""
    deg = G.sum(axis=1)
    out = np.zeros_like(G, dtype=float)
    nz = deg > 0
    out[nz] = G[nz] / deg[nz, None]
    return out


@dataclass
class Group:
    """One school: adjacency, covariates (``n_r x q``) and outcome."""

    group_id: str
    G: np.ndarray
    X: np.ndarray
    y: np.ndarray
    node_ids: list[str] | None = None
    Gn: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        m = self.y.size
        if self.G.shape != (m, m) or self.X.shape[0] != m:
            raise ValueError(f"group {self.group_id}: G, X and y disagree on the number of nodes")
        if np.any(np.diag(self.G) != 0):
            raise ValueError(f"group {self.group_id}: self-links are not allowed")
        if self.node_ids is None:
            self.node_ids = [str(i) for i in range(m)]
        self.Gn = row_normalize(self.G)

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def isolates(self) -> int:
        return int(np.sum(self.G.sum(axis=1) == 0))


@dataclass
class SchoolNetwork:
    """A collection of groups with no links between them."""

    groups: list[Group]
    covariate_names: list[str] | None = None

    def __post_init__(self):
        if not self.groups:
            raise ValueError("network has no groups")
        q = {g.X.shape[1] for g in self.groups}
        if len(q) != 1:
            raise ValueError("all groups must have the same covariates")
        if self.covariate_names is None:
            self.covariate_names = [f"x{j + 1}" for j in range(q.pop())]

    @property
    def n(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def n_covariates(self) -> int:
        return self.groups[0].X.shape[1]

    @property
    def isolates(self) -> int:
        return sum(g.isolates for g in self.groups)

    def stacked(self, per_group) -> np.ndarray:
        """Row-stack ``per_group(g)`` over groups."""
        return np.concatenate([np.atleast_1d(per_group(g)) for g in self.groups], axis=0)

    @property
    def y(self) -> np.ndarray:
        return self.stacked(lambda g: g.y)

    @property
    def X(self) -> np.ndarray:
        return self.stacked(lambda g: g.X)

    @property
    def group_index(self) -> np.ndarray:
        return np.concatenate([np.full(g.size, r) for r, g in enumerate(self.groups)])

    def with_outcome(self, y: np.ndarray) -> "SchoolNetwork":
        """Same graph and covariates with the stacked outcome replaced."""
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.n:
            raise ValueError("outcome has the wrong length")
        out, a = [], 0
        for g in self.groups:
            ng = Group(g.group_id, g.G, g.X, y[a:a + g.size], g.node_ids)
            a += g.size
            out.append(ng)
        return SchoolNetwork(out, list(self.covariate_names))


# CSV input/output ----------------------------------------------------------


def _rows(path: Path, required: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty", line=1) from None
        for col in required:
            if col not in header:
                raise SchemaError(f"{path} lacks the column {col!r}", line=1, column=col)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}: expected {len(header)} fields, got {len(row)}", line=lineno)
            yield lineno, dict(zip(header, (c.strip() for c in row)))


def _float(value: str, path: Path, lineno: int, col: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise SchemaError(f"{path}: {value!r} is not a number", line=lineno, column=col) from None
    if not math.isfinite(x):
        raise SchemaError(f"{path}: non-finite value", line=lineno, column=col)
    return x


def read_network(edges_path, attrs_path, outcome: str = "outcome",
                 covariates: list[str] | None = None) -> SchoolNetwork:
    """Load a network from an edge list and a node attribute table.

    Edges: columns ``group_id, src, dst``.  Attributes: ``group_id, node_id``,
    the outcome column and covariate columns (all remaining columns by default).
    """
    edges_path, attrs_path = Path(edges_path), Path(attrs_path)
    nodes: dict[str, dict[str, int]] = {}
    xs: dict[str, list[list[float]]] = {}
    ys: dict[str, list[float]] = {}
    order: list[str] = []
    with open(attrs_path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if covariates is None:
        covariates = [h for h in header if h not in ("group_id", "node_id", outcome)]
    if not covariates:
        raise SchemaError(f"{attrs_path} has no covariate columns", line=1)
    for lineno, row in _rows(attrs_path, ["group_id", "node_id", outcome, *covariates]):
        gid, nid = row["group_id"], row["node_id"]
        if gid not in nodes:
            nodes[gid], xs[gid], ys[gid] = {}, [], []
            order.append(gid)
        if nid in nodes[gid]:
            raise SchemaError(f"{attrs_path}: duplicate node {nid!r} in group {gid!r}", line=lineno, column="node_id")
        nodes[gid][nid] = len(nodes[gid])
        ys[gid].append(_float(row[outcome], attrs_path, lineno, outcome))
        xs[gid].append([_float(row[c], attrs_path, lineno, c) for c in covariates])
    if not order:
        raise SchemaError(f"{attrs_path} has no data rows", line=2)
    adj = {gid: np.zeros((len(nodes[gid]), len(nodes[gid]))) for gid in order}
    for lineno, row in _rows(edges_path, ["group_id", "src", "dst"]):
        gid = row["group_id"]
        if gid not in nodes:
            raise SchemaError(f"{edges_path}: unknown group {gid!r}", line=lineno, column="group_id")
        for col in ("src", "dst"):
            if row[col] not in nodes[gid]:
                raise SchemaError(f"{edges_path}: unknown node {row[col]!r} in group {gid!r}", line=lineno, column=col)
        i, j = nodes[gid][row["src"]], nodes[gid][row["dst"]]
        if i == j:
            raise SchemaError(f"{edges_path}: self-link on node {row['src']!r}", line=lineno, column="dst")
        adj[gid][i, j] = 1.0
    groups = [Group(gid, adj[gid], np.array(xs[gid]), np.array(ys[gid]), list(nodes[gid])) for gid in order]
    return SchoolNetwork(groups, list(covariates))


def write_network(net: SchoolNetwork, edges_path, attrs_path, outcome: str = "outcome") -> None:
    """Write ``net`` in the format read by :func:`read_network`."""
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "src", "dst"])
        for g in net.groups:
            for i, j in zip(*np.nonzero(g.G)):
                w.writerow([g.group_id, g.node_ids[i], g.node_ids[j]])
    with open(attrs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "node_id", outcome, *net.covariate_names])
        for g in net.groups:
            for i in range(g.size):
                w.writerow([g.group_id, g.node_ids[i], repr(float(g.y[i])), *(repr(float(v)) for v in g.X[i])])


# Synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class PeerDesign:
    """Structural parameters of the linear-in-means outcome model.

    ``y_r = alpha_r + theta1 Gn_r y_r + X_r theta2 + Gn_r X_r theta3 + eps_r`` with
    ``eps_r = u_r + rho Gn_r u_r``: the ``rho`` term makes friends' shocks
    correlated, which makes the peer average endogenous.
    """

    theta1: float
    theta2: np.ndarray
    theta3: np.ndarray
    alpha: np.ndarray
    sigma: float = 1.0
    rho: float = 0.5


def simulate_outcome(net: SchoolNetwork, design: PeerDesign, rng: np.random.Generator) -> np.ndarray:
    """Stacked equilibrium outcome ``(I - theta1 Gn)^{-1}(alpha + X theta2 + Gn X theta3 + eps)``."""
    out = []
    for r, g in enumerate(net.groups):
        u = design.sigma * rng.standard_normal(g.size)
        eps = u + design.rho * g.Gn @ u
        rhs = design.alpha[r] + g.X @ design.theta2 + g.Gn @ g.X @ design.theta3 + eps
        out.append(np.linalg.solve(np.eye(g.size) - design.theta1 * g.Gn, rhs))
    return np.concatenate(out)


def _group_sizes(rng: np.random.Generator, groups: int, total: int) -> np.ndarray:
    w = rng.uniform(0.5, 1.5, groups)
    sizes = np.floor(total * w / w.sum()).astype(int)
    sizes[: total - sizes.sum()] += 1
    return sizes


def synthetic_network(seed: int = SYNTHETIC_SEED, groups: int = SYNTHETIC_GROUPS, nodes: int = SYNTHETIC_NODES,
                      covariates: int = SYNTHETIC_COVARIATES, theta1: float = SYNTHETIC_THETA1,
                      max_friends: int = 10) -> tuple[SchoolNetwork, PeerDesign]:
    """A deterministic school network with an outcome drawn from the peer model.

    Nodes sit on a latent line and nominate up to ``max_friends`` friends with
    probability decaying in latent distance, so friendship is local and
    powers of the normalized adjacency stay informative.  About 5% of nodes
    nominate nobody.  Covariates mix 5 continuous and ``covariates - 5`` binary
    columns, shifted by the latent position to create homophily.
    """
    rng = as_stream(seed).child(DATA).generator(0)
    sizes = _group_sizes(rng, groups, nodes)
    n_cont = min(5, covariates)
    theta2 = np.concatenate([rng.uniform(0.5, 1.0, n_cont) * rng.choice([-1, 1], n_cont),
                             rng.uniform(0.2, 0.6, covariates - n_cont) * rng.choice([-1, 1], covariates - n_cont)])
    theta3 = 0.5 * theta2[::-1].copy()
    alpha = rng.normal(0.0, 1.0, groups)
    out = []
    for r, m in enumerate(sizes):
        pos = rng.uniform(0, 1, m)
        d = np.abs(pos[:, None] - pos[None, :])
        w = np.exp(-d * m / 8.0)
        np.fill_diagonal(w, 0.0)
        G = np.zeros((m, m))
        k = rng.integers(1, max_friends + 1, m)
        k[rng.uniform(size=m) < 0.05] = 0
        for i in range(m):
            if k[i]:
                G[i, rng.choice(m, size=k[i], replace=False, p=w[i] / w[i].sum())] = 1.0
        cont = rng.standard_normal((m, n_cont)) + pos[:, None]
        pb = rng.uniform(0.1, 0.5, covariates - n_cont)
        binary = (rng.uniform(size=(m, covariates - n_cont)) < np.clip(pb + 0.3 * (pos[:, None] - 0.5), 0.02, 0.98))
        X = np.column_stack([cont, binary.astype(float)])
        out.append(Group(f"school{r + 1:02d}", G, X, np.zeros(m), [f"n{i}" for i in range(m)]))
    net = SchoolNetwork(out)
    design = PeerDesign(theta1, theta2, theta3, alpha)
    return net.with_outcome(simulate_outcome(net, design, rng)), design
