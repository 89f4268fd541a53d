"""
(©) EDQ Lab

Local-independence graphs and the eliminability criterion.

Trails are simple vertex sequences whose edges may point either way; a trail is
allowed when its last edge points into its endpoint. Blocking and δ-separation follow
the usual collider rules, with descendants taken in the directed graph.
"""

import logging
from dataclasses import dataclass, field

import networkx as nx

from edq.errors import ConfigError

logger = logging.getLogger(__name__)

OBSERVED_ROLES = ("x", "y", "a")


@dataclass(frozen=True)
class Trail:
    vertices: tuple
    forward: tuple  # forward[i]: the edge points from vertices[i] to vertices[i+1]

    def __post_init__(self):
        if len(self.forward) != len(self.vertices) - 1:
            raise ValueError("A trail needs one orientation per edge.")

    @property
    def allowed(self) -> bool:
        return bool(self.forward) and self.forward[-1]

    def colliders(self) -> list:
        return [self.vertices[i] for i in range(1, len(self.vertices) - 1)
                if self.forward[i - 1] and not self.forward[i]]

    def non_colliders(self) -> list:
        return [self.vertices[i] for i in range(1, len(self.vertices) - 1)
                if not (self.forward[i - 1] and not self.forward[i])]

    def __str__(self):
        parts = [str(self.vertices[0])]
        for v, fwd in zip(self.vertices[1:], self.forward):
            parts.append(" -> " if fwd else " <- ")
            parts.append(str(v))
        return "".join(parts)


@dataclass
class LocalIndependenceGraph:
    """
    Directed graph over the observed processes (roles x, y, a) and unobserved
    processes listed in `unobserved_order`.
    """

    graph: nx.DiGraph
    observed: dict
    unobserved_order: tuple

    def __post_init__(self):
        self.unobserved_order = tuple(self.unobserved_order)
        if set(self.observed) != set(OBSERVED_ROLES):
            raise ConfigError(f"Observed roles must be exactly {OBSERVED_ROLES}, got {sorted(self.observed)}.")
        for role, node in self.observed.items():
            if node not in self.graph:
                raise ConfigError(f"Observed node '{node}' (role {role}) is not in the graph.")
        loops = list(nx.selfloop_edges(self.graph))
        if loops:
            raise ConfigError(f"Self-loops are not allowed: {loops}.")
        hidden = set(self.graph.nodes) - set(self.observed.values())
        if set(self.unobserved_order) != hidden or len(self.unobserved_order) != len(hidden):
            raise ConfigError(
                f"unobserved_order {list(self.unobserved_order)} must list each unobserved node once: {sorted(hidden, key=str)}."
            )

    @property
    def x(self):
        return self.observed["x"]

    @property
    def y(self):
        return self.observed["y"]

    @property
    def a(self):
        return self.observed["a"]

    @classmethod
    def from_dict(cls, data: dict) -> "LocalIndependenceGraph":
        """`{"nodes": [...], "edges": [[u, v], ...], "observed": {"x": .., "y": .., "a": ..}, "unobserved_order": [...]}`"""
        unknown = set(data) - {"nodes", "edges", "observed", "unobserved_order", "name", "description"}
        if unknown:
            raise ConfigError(f"Unknown graph key(s): {sorted(unknown)}")
        try:
            graph = nx.DiGraph()
            graph.add_nodes_from(data["nodes"])
            for u, v in data["edges"]:
                if u not in graph or v not in graph:
                    raise ConfigError(f"Edge ({u}, {v}) references an unknown node.")
                graph.add_edge(u, v)
            return cls(graph, dict(data["observed"]), tuple(data.get("unobserved_order", ())))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed graph description: {e}") from e

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.graph.nodes),
            "edges": [list(edge) for edge in self.graph.edges],
            "observed": dict(self.observed),
            "unobserved_order": list(self.unobserved_order),
        }


def relabel(g: LocalIndependenceGraph, mapping: dict) -> LocalIndependenceGraph:
    """Renames nodes; roles and the unobserved order follow the renaming."""
    graph = nx.relabel_nodes(g.graph, mapping, copy=True)
    observed = {role: mapping.get(node, node) for role, node in g.observed.items()}
    order = tuple(mapping.get(node, node) for node in g.unobserved_order)
    return LocalIndependenceGraph(graph, observed, order)


def _graph(g) -> nx.DiGraph:
    return g.graph if isinstance(g, LocalIndependenceGraph) else g


# ======================================================================================
#                                *** Trails & blocking ***
# ======================================================================================

def enumerate_trails(g, source, target) -> list:
    """Every simple trail from source to target; opposite parallel edges give separate trails."""
    graph = _graph(g)
    if source == target:
        raise ValueError("Trail endpoints must differ.")
    out = []

    def extend(vertices, forward, visited):
        v = vertices[-1]
        steps = [(w, True) for w in graph.successors(v)] + [(w, False) for w in graph.predecessors(v)]
        for w, fwd in steps:
            if w in visited:
                continue
            if w == target:
                out.append(Trail(tuple(vertices) + (w,), tuple(forward) + (fwd,)))
                continue
            visited.add(w)
            extend(vertices + [w], forward + [fwd], visited)
            visited.discard(w)

    extend([source], [], {source})
    return out


def enumerate_allowed_trails(g, source, target) -> list:
    """Simple trails from source to target whose final edge points into target."""
    return [trail for trail in enumerate_trails(g, source, target) if trail.allowed]


def is_blocked(g, trail: Trail, conditioning) -> bool:
    """
    Blocked when an interior non-collider is conditioned on, or when some collider has
    neither itself nor any descendant in the conditioning set.
    """
    graph = _graph(g)
    conditioning = set(conditioning)
    if any(v in conditioning for v in trail.non_colliders()):
        return True
    for v in trail.colliders():
        if v not in conditioning and not (nx.descendants(graph, v) & conditioning):
            return True
    return False


def unblocked_trails(g, sources, u, conditioning) -> list:
    blocking = set(conditioning) | {u}
    out = []
    for source in sources:
        out.extend(t for t in enumerate_allowed_trails(g, source, u) if not is_blocked(g, t, blocking))
    return out


def delta_separated(g, A, u, C) -> bool:
    """A is δ-separated from u by C: {u} ∪ C blocks every allowed trail from each a ∈ A to u."""
    A = set(A)
    if u in A:
        raise ValueError(f"Node {u!r} cannot be both the target and a member of A.")
    return not unblocked_trails(g, A, u, C)


# ======================================================================================
#                                  *** Eliminability ***
# ======================================================================================

@dataclass
class MemberCheck:
    node: object
    conditioning: tuple
    separated: bool
    witnesses: list = field(default_factory=list)


@dataclass
class ConditionCheck:
    name: str
    members: tuple
    conditioning: tuple
    checks: list
    holds: bool


@dataclass
class UnobservedCheck:
    node: object
    conditions: list
    satisfied: bool
    notes: list = field(default_factory=list)


@dataclass
class EliminabilityReport:
    eliminable: bool
    checks: list

    def render(self) -> str:
        lines = [f"eliminable: {'true' if self.eliminable else 'false'}"]
        for check in self.checks:
            lines.append(f"{check.node}: {'ok' if check.satisfied else 'FAILS'}")
            for condition in check.conditions:
                lines.append(
                    f"  {condition.name}: {'holds' if condition.holds else 'fails'} "
                    f"(members {_fmt(condition.members)}, given {_fmt(condition.conditioning)})"
                )
                for member in condition.checks:
                    if member.separated:
                        continue
                    lines.append(f"    {member.node} given {_fmt(member.conditioning)} is reached by:")
                    lines.extend(f"      {trail}" for trail in member.witnesses)
            lines.extend(f"  note: {note}" for note in check.notes)
        return "\n".join(lines)


def _fmt(nodes) -> str:
    return "{" + ", ".join(str(n) for n in nodes) + "}"


def _member_check(g, u_k, node, conditioning, max_witnesses) -> MemberCheck:
    witnesses = unblocked_trails(g, {u_k}, node, conditioning)
    return MemberCheck(node, tuple(conditioning), not witnesses, witnesses[:max_witnesses])


def check_eliminability(g: LocalIndependenceGraph, max_witnesses: int = 5) -> EliminabilityReport:
    """
    For each U_k in order, at least one of:

    1. (N^y, N^x, U_{>k}) is locally independent of U_k given (N^x, N^y, N^a, U_{>k}),
       each member a checked given the union minus a;
    2. N^a is locally independent of U_k given (N^x, N^y, N^a, U_{>k}).

    Local independence is read off δ-separation of {U_k} from the member.
    """
    checks = []
    order = list(g.unobserved_order)
    for k, u_k in enumerate(order):
        later = order[k + 1:]
        conditioning = (g.x, g.y, g.a, *later)
        members = (g.y, g.x, *later)

        first = []
        for member in members:
            given = tuple(n for n in dict.fromkeys(members + conditioning) if n != member)
            first.append(_member_check(g, u_k, member, given, max_witnesses))
        outcome_side = ConditionCheck("condition 1", members, conditioning, first, all(c.separated for c in first))

        given_a = tuple(n for n in conditioning if n != g.a)
        second = _member_check(g, u_k, g.a, given_a, max_witnesses)
        treatment_side = ConditionCheck("condition 2", (g.a,), conditioning, [second], second.separated)

        notes = []
        descendants = nx.descendants(g.graph, u_k)
        earlier = [u for u in order[:k] if u in descendants]
        if earlier:
            notes.append(
                f"earlier unobserved node(s) {_fmt(earlier)} are descendants of {u_k}; "
                f"they are not in the conditioning set, which only adds later ones"
            )
        satisfied = outcome_side.holds or treatment_side.holds
        checks.append(UnobservedCheck(u_k, [outcome_side, treatment_side], satisfied, notes))
        logger.debug(f"Eliminability at {u_k}: condition 1 {outcome_side.holds}, condition 2 {treatment_side.holds}")

    return EliminabilityReport(all(c.satisfied for c in checks), checks)
