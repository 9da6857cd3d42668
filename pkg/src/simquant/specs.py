"""Temporal-logic specifications as DFAs with deviation-robust labeling.

Co-safe specifications are represented by deterministic finite automata over
letters 2^AP; atomic propositions are axis-aligned boxes in output space,
half-open like the grid cells. Because the certified output deviation allows
the true output to sit anywhere in an epsilon-ball around the abstract one,
each abstract state is labeled either with a single certain letter or with
the set of letters achievable inside that ball.
"""

import json
from dataclasses import dataclass, field
from itertools import chain, combinations

import numpy as np

from .models import Box, GridAbstraction

Letter = frozenset

EMPTY_LETTER = Letter()


@dataclass(frozen=True)
class Proposition:
    """Named region of output space, a half-open box [lo, hi)."""

    name: str
    region: Box


def exact_letter(propositions, y) -> Letter:
    """Letter of a concrete output under half-open box membership."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return Letter(
        p.name
        for p in propositions
        if bool((y >= p.region.lo).all() and (y < p.region.hi).all())
    )


def membership_batch(prop: Proposition, Y: np.ndarray) -> np.ndarray:
    """Half-open membership of each row of Y in the proposition region."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return (Y >= prop.region.lo).all(axis=1) & (Y < prop.region.hi).all(axis=1)


@dataclass
class Dfa:
    """Deterministic finite automaton over the alphabet 2^props.

    The transition map must be total; letters carrying propositions outside
    ``props`` are restricted before lookup.
    """

    states: tuple
    initial: object
    accepting: frozenset
    props: tuple
    transitions: dict

    def __post_init__(self):
        self.states = tuple(self.states)
        self.accepting = frozenset(self.accepting)
        self.props = tuple(self.props)
        if self.initial not in self.states:
            raise ValueError("initial state not in state set")
        if not self.accepting <= set(self.states):
            raise ValueError("accepting states not a subset of the state set")
        for q in self.states:
            for letter in self.alphabet():
                if (q, letter) not in self.transitions:
                    raise ValueError(f"transition map is not total: missing ({q}, {set(letter) or '{}'})")
                if self.transitions[(q, letter)] not in self.states:
                    raise ValueError(f"transition from ({q}, {set(letter)}) leaves the state set")

    def alphabet(self):
        names = list(self.props)
        return [Letter(c) for c in chain.from_iterable(combinations(names, k) for k in range(len(names) + 1))]

    def restrict(self, letter) -> Letter:
        return Letter(letter) & Letter(self.props)

    def step(self, q, letter) -> object:
        return self.transitions[(q, self.restrict(letter))]

    def letter_id(self, letter) -> int:
        """Bitmask index of a letter with bit j set for props[j]."""
        restricted = self.restrict(letter)
        return sum(1 << j for j, name in enumerate(self.props) if name in restricted)

    def tables(self):
        """(state index map, transition matrix [q, letter_id] -> q index, accepting mask)."""
        q_index = {q: i for i, q in enumerate(self.states)}
        n_letters = 1 << len(self.props)
        matrix = np.empty((len(self.states), n_letters), dtype=np.intp)
        for q in self.states:
            for letter in self.alphabet():
                matrix[q_index[q], self.letter_id(letter)] = q_index[self.step(q, letter)]
        accepting = np.array([q in self.accepting for q in self.states])
        return q_index, matrix, accepting

    def to_json_dict(self) -> dict:
        return {
            "states": list(self.states),
            "initial": self.initial,
            "accepting": sorted(self.accepting),
            "props": list(self.props),
            "transitions": [
                [q, sorted(letter), self.transitions[(q, letter)]]
                for q in self.states
                for letter in self.alphabet()
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict, props=None) -> "Dfa":
        props = tuple(props if props is not None else data.get("props", ()))
        transitions = {}
        for q, letter, q_next in data["transitions"]:
            transitions[(q, Letter(letter))] = q_next
        return cls(
            states=tuple(data["states"]),
            initial=data["initial"],
            accepting=frozenset(data["accepting"]),
            props=props,
            transitions=transitions,
        )


def template_reach_avoid(p1: Proposition, p2: Proposition) -> Dfa:
    """Automaton for reaching p1 while avoiding p2 until then.

    Three states: trying, accepted, rejected. A letter containing p1 accepts
    (even if p2 holds simultaneously), otherwise p2 rejects; both outcomes
    are absorbing.
    """
    props = (p1.name, p2.name)
    transitions = {}
    states = ("trying", "accepted", "rejected")
    letters = [Letter(c) for c in chain.from_iterable(combinations(props, k) for k in range(3))]
    for letter in letters:
        if p1.name in letter:
            transitions[("trying", letter)] = "accepted"
        elif p2.name in letter:
            transitions[("trying", letter)] = "rejected"
        else:
            transitions[("trying", letter)] = "trying"
        transitions[("accepted", letter)] = "accepted"
        transitions[("rejected", letter)] = "rejected"
    return Dfa(states, "trying", frozenset({"accepted"}), props, transitions)


def template_bounded_invariance(p1: Proposition, horizon: int) -> Dfa:
    """Automaton for holding p1 during the first ``horizon`` steps.

    Chain of horizon progress states plus accepted/rejected: each p1 letter
    advances, any other letter before the horizon rejects.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    props = (p1.name,)
    states = tuple(f"step{i}" for i in range(horizon)) + ("accepted", "rejected")
    transitions = {}
    letters = [EMPTY_LETTER, Letter({p1.name})]
    for i in range(horizon):
        q = f"step{i}"
        advance = "accepted" if i == horizon - 1 else f"step{i + 1}"
        transitions[(q, Letter({p1.name}))] = advance
        transitions[(q, EMPTY_LETTER)] = "rejected"
    for letter in letters:
        transitions[("accepted", letter)] = "accepted"
        transitions[("rejected", letter)] = "rejected"
    return Dfa(states, "step0", frozenset({"accepted"}), props, transitions)


@dataclass
class RobustLabeling:
    """Achievable letters of every abstract state under an epsilon output deviation.

    ``letters[i]`` enumerates the letters the true output may produce around
    state i's output; states with a single entry are epsilon-certain. The
    sink state carries the empty letter.
    """

    letters: list
    certain: np.ndarray
    base: list = field(default_factory=list)
    ambiguous: list = field(default_factory=list)

    @property
    def n_states(self) -> int:
        return len(self.letters)


def _classify(prop: Proposition, y: np.ndarray, eps: float) -> str:
    """Classify one proposition at one output point: true / false / ambiguous.

    Robustly true iff the closed eps-ball fits inside the half-open box;
    robustly false iff the ball is disjoint from it (exact Euclidean distance
    to the region, with the removed upper faces handled explicitly).
    """
    lo, hi = prop.region.lo, prop.region.hi
    if ((y - eps) >= lo).all() and ((y + eps) < hi).all():
        return "true"
    nearest = np.clip(y, lo, hi)
    dist = float(np.linalg.norm(y - nearest))
    if dist > eps or (dist == eps and (nearest == hi).any()):
        return "false"
    return "ambiguous"


def robust_labels(abstraction: GridAbstraction, propositions, eps: float) -> RobustLabeling:
    """Label every abstract state with its epsilon-achievable letters.

    For each representative output, a proposition is robustly decided when
    the epsilon-ball lies entirely inside or outside its region; undecided
    propositions enter in every combination. The sink is certain and empty.
    """
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    C = abstraction.model.C
    letters = []
    certain = []
    base_sets = []
    ambiguous_sets = []
    for rep in abstraction.representatives:
        y = C @ rep
        base = set()
        ambiguous = set()
        for prop in propositions:
            kind = _classify(prop, y, eps)
            if kind == "true":
                base.add(prop.name)
            elif kind == "ambiguous":
                ambiguous.add(prop.name)
        amb = sorted(ambiguous)
        achievable = tuple(
            Letter(base | set(extra))
            for extra in chain.from_iterable(combinations(amb, k) for k in range(len(amb) + 1))
        )
        letters.append(achievable)
        certain.append(len(achievable) == 1)
        base_sets.append(Letter(base))
        ambiguous_sets.append(Letter(ambiguous))
    # sink: out of domain, empty letter, never inside any proposition
    letters.append((EMPTY_LETTER,))
    certain.append(True)
    base_sets.append(EMPTY_LETTER)
    ambiguous_sets.append(EMPTY_LETTER)
    return RobustLabeling(
        letters=letters,
        certain=np.array(certain),
        base=base_sets,
        ambiguous=ambiguous_sets,
    )


def load_spec(path):
    """Read propositions and a DFA (explicit or template) from a spec JSON."""
    with open(path) as fh:
        data = json.load(fh)
    props = [
        Proposition(p["name"], Box(np.array(p["lo"], dtype=float), np.array(p["hi"], dtype=float)))
        for p in data.get("propositions", [])
    ]
    if "template" in data:
        name = data["template"]
        if name == "reach_avoid":
            if len(props) != 2:
                raise ValueError("reach_avoid template needs exactly two propositions (target, avoid)")
            return props, template_reach_avoid(props[0], props[1])
        if name == "bounded_invariance":
            if len(props) != 1:
                raise ValueError("bounded_invariance template needs exactly one proposition")
            return props, template_bounded_invariance(props[0], int(data["horizon"]))
        raise ValueError(f"unknown template {name!r}")
    if "dfa" not in data:
        raise ValueError("spec file needs either a 'template' or a 'dfa' block")
    dfa = Dfa.from_json_dict(data["dfa"], props=[p.name for p in props])
    return props, dfa
