"""
Causal structures the generators and auditors know about, and the variable
roles identifiers read from an observed law.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx

from errors import DomainError

# Context label used when a structure has no treatment variable
NO_TREATMENT = "*"


class Structure(str, Enum):
    FIG1_OBSERVED_CONFOUNDER = "fig1"
    FIG2_CONFOUNDER_PROXIES = "fig2"
    FIG3_KP = "fig3"
    FIG4_TRIPLE_PROXY = "fig4"
    FIGA1_FRONTDOOR = "figa1"
    FIGA3_MEDIATOR_PROXIES = "figa3"

    @classmethod
    def parse(cls, value: "str | Structure") -> "Structure":
        if isinstance(value, Structure):
            return value
        text = str(value).strip()
        for member in cls:
            if text.lower() == member.value or text.upper() == member.name:
                return member
        raise DomainError(f"Unknown structure '{value}'", {"known": [m.value for m in cls]})


@dataclass(frozen=True)
class ProxyRoles:
    """Names of the observed variables an identifier consumes"""
    treatment: Optional[str] = "A"
    outcome: str = "Y"
    proxy_w: str = "W"
    proxy_z: str = "Z"

    @property
    def observed(self) -> List[str]:
        names = [self.proxy_w, self.proxy_z, self.outcome]
        if self.treatment:
            names.insert(0, self.treatment)
        return names


@dataclass(frozen=True)
class MarkovStatement:
    """Conditional mutual independence of `groups` given `given`"""
    name: str
    groups: Tuple[Tuple[str, ...], ...]
    given: Tuple[str, ...]


@dataclass(frozen=True)
class StructureInfo:
    structure: Structure
    variables: Tuple[str, ...]
    edges: Tuple[Tuple[str, str], ...]
    optional_edges: Tuple[Tuple[str, str], ...] = ()
    latent: Tuple[str, ...] = ()
    proxy_latent: Optional[str] = None
    confounders: Tuple[str, ...] = ()
    mediator: Optional[str] = None
    treatment: Optional[str] = "A"
    outcome: str = "Y"
    markov: Tuple[MarkovStatement, ...] = ()
    positivity: Tuple[Tuple[str, ...], ...] = ()
    roles: Optional[ProxyRoles] = None
    has_bridge: bool = False

    def graph(self, include_optional: bool = True) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.variables)
        graph.add_edges_from(self.edges)
        if include_optional:
            graph.add_edges_from(self.optional_edges)
        return graph

    def parents(self, variable: str, include_optional: bool = True) -> List[str]:
        graph = self.graph(include_optional)
        # keep declaration order so factor tables are laid out deterministically
        return [v for v in self.variables if graph.has_edge(v, variable)]

    @property
    def array_markov(self) -> Tuple[MarkovStatement, ...]:
        """Independences the three-way array route relies on, whether or not the graph implies them"""
        if self.roles is None or self.proxy_latent is None:
            return ()
        w, z, y, a = self.roles.proxy_w, self.roles.proxy_z, self.roles.outcome, self.roles.treatment
        latent = self.proxy_latent
        if a is None:
            return (MarkovStatement(f"{w},{z},{y} mutually independent | {latent}", ((w,), (z,), (y,)), (latent,)),)
        return (
            MarkovStatement(f"{w} _||_ {a} | {latent}", ((w,), (a,)), (latent,)),
            MarkovStatement(f"{w},{z},{y} mutually independent | {latent},{a}", ((w,), (z,), (y,)), (latent, a)),
        )

    def topological_order(self, include_optional: bool = True) -> List[str]:
        return list(nx.lexicographical_topological_sort(self.graph(include_optional),
                                                        key=self.variables.index))


_PROXY_ROLES = ProxyRoles()

STRUCTURES: Dict[Structure, StructureInfo] = {
    Structure.FIG1_OBSERVED_CONFOUNDER: StructureInfo(
        structure=Structure.FIG1_OBSERVED_CONFOUNDER,
        variables=("C", "A", "Y"),
        edges=(("C", "A"), ("C", "Y"), ("A", "Y")),
        confounders=("C",),
        positivity=(("A", "C"),),
    ),
    Structure.FIG2_CONFOUNDER_PROXIES: StructureInfo(
        structure=Structure.FIG2_CONFOUNDER_PROXIES,
        variables=("U", "Z", "W", "A", "Y"),
        edges=(("U", "Z"), ("U", "W"), ("U", "Y"), ("U", "A"), ("A", "Y")),
        optional_edges=(("Z", "A"), ("W", "Y")),
        latent=("U",),
        proxy_latent="U",
        confounders=("U",),
        markov=(
            MarkovStatement("W _||_ Z,A | U", (("W",), ("Z", "A")), ("U",)),
            MarkovStatement("Z _||_ Y | U,A", (("Z",), ("Y",)), ("U", "A")),
        ),
        positivity=(("A", "U"), ("A", "Z")),
        roles=_PROXY_ROLES,
        has_bridge=True,
    ),
    Structure.FIG3_KP: StructureInfo(
        structure=Structure.FIG3_KP,
        variables=("U", "Z", "W", "A", "Y"),
        edges=(("U", "Z"), ("U", "W"), ("U", "Y"), ("U", "A"), ("A", "Y"), ("Z", "A")),
        latent=("U",),
        proxy_latent="U",
        confounders=("U",),
        markov=(
            MarkovStatement("W _||_ A | U", (("W",), ("A",)), ("U",)),
            MarkovStatement("W,Z,Y mutually independent | U,A", (("W",), ("Z",), ("Y",)), ("U", "A")),
        ),
        positivity=(("A", "U"), ("A", "Z")),
        roles=_PROXY_ROLES,
        has_bridge=True,
    ),
    Structure.FIG4_TRIPLE_PROXY: StructureInfo(
        structure=Structure.FIG4_TRIPLE_PROXY,
        variables=("L", "W", "Z", "Y"),
        edges=(("L", "Z"), ("L", "W"), ("L", "Y")),
        latent=("L",),
        proxy_latent="L",
        treatment=None,
        markov=(
            MarkovStatement("W,Z,Y mutually independent | L", (("W",), ("Z",), ("Y",)), ("L",)),
        ),
        positivity=(("L",),),
        roles=ProxyRoles(treatment=None),
    ),
    Structure.FIGA1_FRONTDOOR: StructureInfo(
        structure=Structure.FIGA1_FRONTDOOR,
        variables=("U", "A", "M", "Y"),
        edges=(("U", "A"), ("U", "Y"), ("A", "M"), ("M", "Y")),
        latent=("U",),
        confounders=("U",),
        mediator="M",
        markov=(
            MarkovStatement("M _||_ U | A", (("M",), ("U",)), ("A",)),
            MarkovStatement("Y _||_ A | M,U", (("Y",), ("A",)), ("M", "U")),
        ),
        positivity=(("A", "M"), ("A", "U")),
    ),
    Structure.FIGA3_MEDIATOR_PROXIES: StructureInfo(
        structure=Structure.FIGA3_MEDIATOR_PROXIES,
        variables=("U", "A", "M", "Z", "W", "Y"),
        edges=(("A", "M"), ("M", "Y"), ("U", "Y"), ("U", "A"), ("M", "W"), ("M", "Z")),
        optional_edges=(("A", "Z"),),
        latent=("U", "M"),
        proxy_latent="M",
        confounders=("U",),
        mediator="M",
        markov=(
            MarkovStatement("W _||_ A | M", (("W",), ("A",)), ("M",)),
            MarkovStatement("W,Z,Y mutually independent | M,A", (("W",), ("Z",), ("Y",)), ("M", "A")),
        ),
        positivity=(("A", "M"), ("A", "U")),
        roles=_PROXY_ROLES,
    ),
}


def structure_info(structure: "str | Structure") -> StructureInfo:
    return STRUCTURES[Structure.parse(structure)]


def contexts(levels: Sequence[str], treatment: Optional[str]) -> List[Tuple[str, Dict[str, str]]]:
    """(label, assignment) pairs for every treatment level, or the single unconditioned context"""
    if not treatment:
        return [(NO_TREATMENT, {})]
    return [(label, {treatment: label}) for label in levels]
