"""Bayesian-network model specifications and BDeu prior pseudo-counts.

A model is a DAG over discrete index variables.  Tokens are placed into the
cells of the full index space; the observed tensor is the contraction of the
allocation tensor onto the visible nodes, with axes in the order listed in
``ModelSpec.visible``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence


class ModelError(ValueError):
    """Raised for an invalid model specification."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [Violation("invalid", violations)]
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    @property
    def kinds(self):
        return [v.kind for v in self.violations]


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


@dataclass(frozen=True)
class Node:
    name: str
    card: int


@dataclass(frozen=True)
class ModelSpec:
    """DAG over index variables.

    ``parents[n]`` is a sorted tuple of node indices; ``visible`` lists the
    observed nodes in the axis order of the observation tensor.  Each tying
    group is a tuple of ``(child, parents)`` bindings whose conditional tables
    are shared.
    """

    nodes: tuple[Node, ...]
    parents: tuple[tuple[int, ...], ...]
    visible: tuple[int, ...]
    tying: tuple[tuple[tuple[int, tuple[int, ...]], ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(
            self, "parents", tuple(tuple(sorted(p)) for p in self.parents)
        )
        object.__setattr__(self, "visible", tuple(self.visible))
        object.__setattr__(
            self,
            "tying",
            tuple(tuple((c, tuple(p)) for c, p in g) for g in self.tying),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def cards(self) -> tuple[int, ...]:
        return tuple(n.card for n in self.nodes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    @property
    def latent(self) -> tuple[int, ...]:
        vis = set(self.visible)
        return tuple(n for n in range(self.n_nodes) if n not in vis)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ModelError([Violation("bad-index", f"unknown node {name!r}")])

    def family(self, n: int) -> tuple[int, ...]:
        """Child first, then its parents in ascending order."""
        return (n,) + self.parents[n]

    def family_shape(self, n: int) -> tuple[int, ...]:
        return tuple(self.nodes[m].card for m in self.family(n))

    def parent_shape(self, n: int) -> tuple[int, ...]:
        return tuple(self.nodes[m].card for m in self.parents[n])

    def edges(self) -> list[tuple[int, int]]:
        return [(p, c) for c in range(self.n_nodes) for p in self.parents[c]]

    def topological_order(self) -> list[int]:
        order = _toposort(self.n_nodes, self.parents)
        if order is None:
            raise ModelError([Violation("cycle-detected", "parent relation has a cycle")])
        return order

    def with_cards(self, cards: Mapping[str | int, int]) -> "ModelSpec":
        """Copy with some node cardinalities replaced (keys are names or indices)."""
        nodes = list(self.nodes)
        for key, card in cards.items():
            n = key if isinstance(key, int) else self.index(key)
            nodes[n] = Node(nodes[n].name, int(card))
        return ModelSpec(tuple(nodes), self.parents, self.visible, self.tying)

    @property
    def is_tied(self) -> bool:
        return bool(self.tying)


@dataclass(frozen=True)
class PriorSpec:
    """Gamma(a, b) prior on the intensity with BDeu Dirichlet tables.

    ``family_alpha`` optionally overrides the flat per-cell pseudo-count of
    individual families (node index -> constant).  Leaving it empty gives the
    consistent BDeu prior ``a / prod(cards of the family)``.
    """

    a: float = 1.0
    b: float = 1.0
    family_alpha: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"prior shape a must be positive, got {self.a}")
        if not (self.b > 0 and math.isfinite(self.b)):
            raise ValueError(f"prior rate b must be positive, got {self.b}")
        for n, v in self.family_alpha.items():
            if not v > 0:
                raise ValueError(f"family pseudo-count for node {n} must be positive")
        object.__setattr__(self, "family_alpha", dict(self.family_alpha))


@dataclass(frozen=True)
class FlatAlpha:
    """Constant-valued pseudo-count table over one family.

    Every cell of the family holds ``value``; every parent configuration
    holds ``parent_value`` (the sum over the child index).
    """

    value: float
    parent_value: float
    shape: tuple[int, ...]

    def __getitem__(self, index) -> float:
        return self.value

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def total(self) -> float:
        return self.value * self.size


def _toposort(n_nodes, parents):
    indeg = [len(p) for p in parents]
    children = [[] for _ in range(n_nodes)]
    for c, ps in enumerate(parents):
        for p in ps:
            if 0 <= p < n_nodes:
                children[p].append(c)
    ready = [n for n in range(n_nodes) if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return order if len(order) == n_nodes else None


def validate(spec: ModelSpec) -> list[Violation]:
    """Return every violated invariant; an empty list means the spec is valid."""
    out = []
    n_nodes = spec.n_nodes
    names = spec.names
    if len(set(names)) != n_nodes:
        out.append(Violation("bad-index", "duplicate node names"))
    for node in spec.nodes:
        if not (isinstance(node.card, int) and node.card >= 1):
            out.append(Violation("bad-index", f"node {node.name!r} has cardinality {node.card!r}"))
    if len(spec.parents) != n_nodes:
        out.append(Violation("bad-index", "parents list length differs from node count"))
        return out
    for c, ps in enumerate(spec.parents):
        for p in ps:
            if not 0 <= p < n_nodes:
                out.append(Violation("bad-index", f"parent {p} of {names[c]!r} out of range"))
            elif p == c:
                out.append(Violation("cycle-detected", f"self loop on {names[c]!r}"))
    for v in spec.visible:
        if not 0 <= v < n_nodes:
            out.append(Violation("bad-index", f"visible node {v} out of range"))
    if len(set(spec.visible)) != len(spec.visible):
        out.append(Violation("bad-index", "visible set lists a node twice"))
    if not spec.visible:
        out.append(Violation("empty-visible-set", "no visible nodes"))
    if any(v.kind == "bad-index" for v in out):
        return out
    if _toposort(n_nodes, spec.parents) is None:
        out.append(Violation("cycle-detected", "parent relation has a cycle"))
    out.extend(_validate_tying(spec))
    return out


def _validate_tying(spec: ModelSpec) -> list[Violation]:
    out = []
    names = spec.names
    for g, group in enumerate(spec.tying):
        shapes = []
        for child, ps in group:
            if not 0 <= child < spec.n_nodes or any(not 0 <= p < spec.n_nodes for p in ps):
                out.append(Violation("bad-index", f"tying group {g} references unknown node"))
                return out
            if tuple(sorted(ps)) != spec.parents[child]:
                out.append(
                    Violation(
                        "tying-shape-mismatch",
                        f"binding of {names[child]!r} does not list its parents",
                    )
                )
                continue
            shapes.append(tuple(spec.nodes[m].card for m in (child,) + tuple(ps)))
        if len(set(shapes)) > 1:
            out.append(
                Violation(
                    "tying-shape-mismatch",
                    f"tying group {g} binds tables of shapes {sorted(set(shapes))}",
                )
            )
    if not out and spec.tying and tied_pattern(spec) is None:
        out.append(
            Violation(
                "unsupported-tying-pattern",
                "only a single latent root with all children tied is supported",
            )
        )
    return out


def tied_pattern(spec: ModelSpec):
    """Return ``(root, children)`` for the symmetric CP pattern, else ``None``.

    The supported pattern is a single latent root whose children are exactly
    the visible nodes, all with one parent (the root) and tied in one group.
    """
    if len(spec.tying) != 1:
        return None
    roots = [n for n in range(spec.n_nodes) if not spec.parents[n]]
    if len(roots) != 1:
        return None
    root = roots[0]
    children = tuple(n for n in range(spec.n_nodes) if n != root)
    if any(spec.parents[c] != (root,) for c in children):
        return None
    if root in spec.visible or set(spec.visible) != set(children):
        return None
    bound = [c for c, _ in spec.tying[0]]
    if sorted(bound) != sorted(children) or len(set(bound)) != len(bound):
        return None
    return root, tuple(spec.visible)


def require_valid(spec: ModelSpec) -> ModelSpec:
    problems = validate(spec)
    if problems:
        raise ModelError(problems)
    return spec


def alpha_family(spec: ModelSpec, prior: PriorSpec, n: int) -> FlatAlpha:
    """Flat pseudo-count table of node ``n``'s family.

    Under BDeu each family cell receives ``a / prod(I_m, m in fa(n))`` so the
    family tables are contractions of one shared ``alpha`` tensor of mass a.
    """
    shape = spec.family_shape(n)
    if n in prior.family_alpha:
        value = float(prior.family_alpha[n])
    else:
        value = prior.a / math.prod(shape)
    return FlatAlpha(value, value * spec.nodes[n].card, shape)


# -- catalog ---------------------------------------------------------------

CATALOG_ARITY = {
    "klnmf": 3,
    "cp": None,
    "tucker": 6,
    "pachinko": None,
    "mmb": 3,
    "snmf": 2,
}


def _build(names_cards, edges, visible, tying=()):
    nodes = tuple(Node(n, int(c)) for n, c in names_cards)
    idx = {n.name: i for i, n in enumerate(nodes)}
    parents = [[] for _ in nodes]
    for p, c in edges:
        parents[idx[c]].append(idx[p])
    tie = tuple(tuple((idx[c], tuple(idx[p] for p in ps)) for c, *ps in g) for g in tying)
    return require_valid(ModelSpec(nodes, tuple(map(tuple, parents)), tuple(idx[v] for v in visible), tie))


def build_catalog_model(kind: str, dims: Sequence[int]) -> ModelSpec:
    """Graph of a standard factorization model.

    ``dims`` by kind:

    - ``klnmf``: (I, K, J); chain j -> k -> i, observed X is I x J
    - ``cp``: (R, I_1, ..., I_N); latent r with children i_1..i_N
    - ``tucker``: (I_1, I_2, I_3, R_1, R_2, R_3); core r3 -> r2 -> r1 with r3 -> r1,
      and r_n -> i_n
    - ``pachinko``: (J, K_1, ..., K_L, I); chain j -> k_1 -> ... -> k_L -> i
    - ``mmb``: (I, K, S); i1 -> k1 -> s <- k2 <- i2
    - ``snmf``: (I, R); cp with N = 2 and both conditionals tied
    """
    dims = [int(d) for d in dims]
    if kind not in CATALOG_ARITY:
        raise ValueError(f"unknown catalog model {kind!r}")
    arity = CATALOG_ARITY[kind]
    if arity is not None and len(dims) != arity:
        raise ModelError([Violation("arity-mismatch", f"{kind} needs {arity} dims, got {len(dims)}")])
    if any(d < 1 for d in dims):
        raise ModelError([Violation("bad-index", "cardinalities must be positive")])
    if kind == "klnmf":
        i, k, j = dims
        return _build([("i", i), ("k", k), ("j", j)], [("j", "k"), ("k", "i")], ["i", "j"])
    if kind == "cp":
        if len(dims) < 2:
            raise ModelError([Violation("arity-mismatch", "cp needs R and at least one mode")])
        r, *modes = dims
        names = [f"i{n + 1}" for n in range(len(modes))]
        return _build([("r", r)] + list(zip(names, modes)), [("r", m) for m in names], names)
    if kind == "tucker":
        i1, i2, i3, r1, r2, r3 = dims
        return _build(
            [("i1", i1), ("i2", i2), ("i3", i3), ("r1", r1), ("r2", r2), ("r3", r3)],
            [("r3", "r2"), ("r3", "r1"), ("r2", "r1"), ("r1", "i1"), ("r2", "i2"), ("r3", "i3")],
            ["i1", "i2", "i3"],
        )
    if kind == "pachinko":
        if len(dims) < 3:
            raise ModelError([Violation("arity-mismatch", "pachinko needs J, K_1.., I")])
        j, *ks, i = dims
        chain = ["j"] + [f"k{l + 1}" for l in range(len(ks))] + ["i"]
        cards = [j] + ks + [i]
        return _build(list(zip(chain, cards)), list(zip(chain[:-1], chain[1:])), ["i", "j"])
    if kind == "mmb":
        i, k, s = dims
        return _build(
            [("i1", i), ("i2", i), ("k1", k), ("k2", k), ("s", s)],
            [("i1", "k1"), ("i2", "k2"), ("k1", "s"), ("k2", "s")],
            ["i1", "i2", "s"],
        )
    # snmf
    i, r = dims
    return _build(
        [("r", r), ("i1", i), ("i2", i)],
        [("r", "i1"), ("r", "i2")],
        ["i1", "i2"],
        tying=[[("i1", "r"), ("i2", "r")]],
    )


def latent_cards(spec: ModelSpec, k: int) -> ModelSpec:
    """Set every latent node's cardinality to ``k``."""
    return spec.with_cards({n: k for n in spec.latent})


# -- Markov equivalence ----------------------------------------------------

def _skeleton(spec):
    return {frozenset(e) for e in spec.edges()}


def _immoralities(spec):
    skel = _skeleton(spec)
    out = set()
    for c, ps in enumerate(spec.parents):
        for x in ps:
            for y in ps:
                if x < y and frozenset((x, y)) not in skel:
                    out.add((frozenset((x, y)), c))
    return out


def markov_equivalent_reorder(spec: ModelSpec, order: Sequence[int | str]) -> ModelSpec:
    """Re-orient every edge of the skeleton to follow ``order``.

    ``order`` is a permutation of the nodes (indices or names).  The result is
    rejected with a ``not-equivalent`` violation when it changes the set of
    immoralities.
    """
    perm = [o if isinstance(o, int) else spec.index(o) for o in order]
    if sorted(perm) != list(range(spec.n_nodes)):
        raise ModelError([Violation("bad-index", "order is not a permutation of the nodes")])
    rank = {n: r for r, n in enumerate(perm)}
    parents = [[] for _ in range(spec.n_nodes)]
    for edge in _skeleton(spec):
        x, y = sorted(edge, key=rank.__getitem__)
        parents[y].append(x)
    out = ModelSpec(spec.nodes, tuple(map(tuple, parents)), spec.visible, ())
    if _immoralities(out) != _immoralities(spec):
        raise ModelError([Violation("not-equivalent", "reorientation changes the immoralities")])
    if spec.tying:
        if out.parents != spec.parents:
            raise ModelError([Violation("not-equivalent", "tied models cannot be re-oriented")])
        return spec
    return require_valid(out)


# -- JSON ------------------------------------------------------------------

def spec_from_dict(d: Mapping) -> tuple[ModelSpec, PriorSpec | None]:
    try:
        nodes = tuple(Node(str(n["name"]), int(n["card"])) for n in d["nodes"])
        idx = {n.name: i for i, n in enumerate(nodes)}

        def lookup(name):
            if name not in idx:
                raise ModelError([Violation("bad-index", f"unknown node {name!r}")])
            return idx[name]

        parents = [[] for _ in nodes]
        for p, c in d.get("edges", []):
            parents[lookup(c)].append(lookup(p))
        visible = tuple(lookup(v) for v in d["visible"])
        tying = tuple(
            tuple((lookup(b[0]), tuple(lookup(p) for p in b[1:])) for b in group)
            for group in d.get("tying", [])
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError([Violation("parse-error", f"malformed model spec: {exc}")])
    spec = require_valid(ModelSpec(nodes, tuple(map(tuple, parents)), visible, tying))
    prior = None
    if "prior" in d:
        prior = PriorSpec(float(d["prior"].get("a", 1.0)), float(d["prior"].get("b", 1.0)))
    return spec, prior


def spec_to_dict(spec: ModelSpec, prior: PriorSpec | None = None) -> dict:
    names = spec.names
    d = {
        "nodes": [{"name": n.name, "card": n.card} for n in spec.nodes],
        "edges": [[names[p], names[c]] for p, c in spec.edges()],
        "visible": [names[v] for v in spec.visible],
    }
    if prior is not None:
        d["prior"] = {"a": prior.a, "b": prior.b}
    if spec.tying:
        d["tying"] = [[[names[c]] + [names[p] for p in ps] for c, ps in g] for g in spec.tying]
    return d


def load_model(path) -> tuple[ModelSpec, PriorSpec | None]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError([Violation("parse-error", f"{path}: {exc}")])
    return spec_from_dict(d)


def save_model(spec: ModelSpec, path, prior: PriorSpec | None = None) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec, prior), indent=2) + "\n")
