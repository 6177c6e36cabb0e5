"""SMILES to heavy-atom molecular graph.

Supported grammar: organic-subset atoms (``B C N O P S F Cl Br I`` and the
aromatic ``b c n o p s``), bracket atoms with isotope, hydrogen count, charge
and atom class, bond symbols ``- = # :``, branches, ring closures (single
digit and ``%nn``) and ``.`` component separators. Stereo markers (``/``,
``\\`` and ``@`` inside brackets) are accepted and dropped; the result carries
``stereo_ignored=True`` when that happened. Implicit hydrogens are never
materialized; an explicit ``[H]`` atom is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from safedrug.errors import SmilesSyntaxError, UnsupportedFeature

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
BOND_CHAR = {SINGLE: "-", DOUBLE: "=", TRIPLE: "#", AROMATIC: ":"}

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")

ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni
    Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe
    Cs Ba La Ce Gd Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Ra""".split()
)
AROMATIC_BRACKET = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S", "se": "Se", "as": "As", "te": "Te"}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool
    index: int
    charge: int = 0

    @property
    def token(self):
        """Atom-vocabulary token: the element, lowercased when aromatic."""
        return self.element.lower() if self.aromatic else self.element


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: str
    in_ring: bool = False

    @property
    def pair(self):
        return (self.begin, self.end) if self.begin < self.end else (self.end, self.begin)


@dataclass(frozen=True, eq=False)
class MoleculeGraph:
    atoms: tuple
    bonds: tuple
    smiles: str = ""
    stereo_ignored: bool = False
    _key: tuple = field(default=(), repr=False)

    def __eq__(self, other):
        if not isinstance(other, MoleculeGraph):
            return NotImplemented
        return self.atoms == other.atoms and self.bonds == other.bonds

    def __hash__(self):
        return hash((self.atoms, self.bonds))

    @property
    def n_atoms(self):
        return len(self.atoms)

    @cached_property
    def adjacency(self):
        a = np.zeros((len(self.atoms), len(self.atoms)), dtype=np.int8)
        for b in self.bonds:
            a[b.begin, b.end] = a[b.end, b.begin] = 1
        return a

    @cached_property
    def neighbors(self):
        nb = [[] for _ in self.atoms]
        for b in self.bonds:
            nb[b.begin].append((b.end, b))
            nb[b.end].append((b.begin, b))
        return tuple(tuple(x) for x in nb)

    def components(self):
        """Connected components as sorted tuples of atom indices."""
        seen, comps = set(), []
        for start in range(len(self.atoms)):
            if start in seen:
                continue
            stack, comp = [start], []
            seen.add(start)
            while stack:
                i = stack.pop()
                comp.append(i)
                for j, _ in self.neighbors[i]:
                    if j not in seen:
                        seen.add(j)
                        stack.append(j)
            comps.append(tuple(sorted(comp)))
        return comps

    def permuted(self, perm):
        """Relabel atoms so that old atom ``i`` becomes ``perm[i]``."""
        perm = list(perm)
        inverse = [0] * len(perm)
        for old, new in enumerate(perm):
            inverse[new] = old
        atoms = tuple(
            Atom(self.atoms[old].element, self.atoms[old].aromatic, new, self.atoms[old].charge)
            for new, old in enumerate(inverse)
        )
        bonds = tuple(Bond(perm[b.begin], perm[b.end], b.order, b.in_ring) for b in self.bonds)
        return MoleculeGraph(atoms, bonds, self.smiles, self.stereo_ignored)


def _ring_bonds(n_atoms, pairs):
    """Indices of bonds lying on a cycle (non-bridges), via Tarjan low-links."""
    adj = [[] for _ in range(n_atoms)]
    for k, (i, j) in enumerate(pairs):
        adj[i].append((j, k))
        adj[j].append((i, k))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridges = set()
    clock = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = clock
        clock += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nxt, k in it:
                if k == via:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = clock
                    clock += 1
                    stack.append((nxt, k, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.add(via)
    return {k for k in range(len(pairs)) if k not in bridges}


class _Parser:
    def __init__(self, s):
        self.s = s
        self.pos = 0
        self.atoms = []  # (element, aromatic, charge)
        self.bonds = {}  # (i, j) -> order or None (implicit)
        self.stereo = False

    def error(self, message, pos=None):
        raise SmilesSyntaxError(message, self.s, self.pos if pos is None else pos)

    def add_bond(self, i, j, order, pos):
        key = (min(i, j), max(i, j))
        if i == j:
            self.error("ring closure bonds an atom to itself", pos)
        if key in self.bonds:
            self.error("duplicate bond", pos)
        self.bonds[key] = order

    def parse(self):
        s = self.s
        n = len(s)
        prev = None
        pending = None  # explicit bond symbol awaiting its second atom
        pending_pos = 0
        branches = []
        rings = {}  # ring number -> (atom, bond order or None, offset)
        while self.pos < n:
            c = s[self.pos]
            start = self.pos
            if c == "(":
                if prev is None:
                    self.error("branch before any atom")
                if pending is not None:
                    self.error("bond symbol before branch")
                branches.append((prev, start))
                self.pos += 1
            elif c == ")":
                if not branches:
                    self.error("unbalanced ')'")
                if pending is not None:
                    self.error("dangling bond symbol", pending_pos)
                prev, _ = branches.pop()
                self.pos += 1
            elif c in BOND_SYMBOLS or c in "/\\":
                if prev is None:
                    self.error("bond symbol before any atom")
                if pending is not None:
                    self.error("two consecutive bond symbols")
                if c in "/\\":
                    self.stereo = True
                    pending = SINGLE
                else:
                    pending = BOND_SYMBOLS[c]
                pending_pos = start
                self.pos += 1
            elif c == "$":
                raise UnsupportedFeature("quadruple bonds are not supported", s, start)
            elif c == "*":
                raise UnsupportedFeature("wildcard atoms are not supported", s, start)
            elif c == ".":
                if pending is not None:
                    self.error("bond symbol before '.'", pending_pos)
                if branches:
                    self.error("'.' inside a branch")
                prev = None
                self.pos += 1
            elif c.isdigit() or c == "%":
                if prev is None:
                    self.error("ring closure before any atom")
                if c == "%":
                    digits = s[self.pos + 1 : self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.error("'%' must be followed by two digits")
                    number = int(digits)
                    self.pos += 3
                else:
                    number = int(c)
                    self.pos += 1
                if number in rings:
                    other, order, _ = rings.pop(number)
                    if pending is not None and order is not None and pending != order:
                        self.error("conflicting ring-closure bond orders", start)
                    self.add_bond(other, prev, pending if pending is not None else order, start)
                else:
                    rings[number] = (prev, pending, start)
                pending = None
            else:
                idx = self.atom()
                if prev is not None:
                    self.add_bond(prev, idx, pending, pending_pos if pending is not None else start)
                pending = None
                prev = idx
        if pending is not None:
            self.error("dangling bond symbol", pending_pos)
        if branches:
            self.error("unbalanced '('", branches[-1][1])
        if rings:
            number, (_, _, offset) = min(rings.items(), key=lambda kv: kv[1][2])
            self.error(f"unmatched ring closure {number}", offset)
        if not self.atoms:
            self.error("no atoms", 0)
        return self.build()

    def atom(self):
        s, start = self.s, self.pos
        if s[start] == "[":
            return self.bracket_atom()
        for sym in ORGANIC:
            if s.startswith(sym, start):
                self.pos += len(sym)
                return self.new_atom(sym, False, 0)
        for sym in AROMATIC_ORGANIC:
            if s.startswith(sym, start):
                self.pos += 1
                return self.new_atom(sym.upper(), True, 0)
        self.error(f"unknown element or character {s[start]!r}")

    def new_atom(self, element, aromatic, charge):
        self.atoms.append((element, aromatic, charge))
        return len(self.atoms) - 1

    def bracket_atom(self):
        s, open_pos = self.s, self.pos
        close = s.find("]", open_pos)
        if close == -1:
            self.error("unterminated bracket atom")
        body = s[open_pos + 1 : close]
        i = 0
        while i < len(body) and body[i].isdigit():  # isotope
            i += 1
        sym_pos = open_pos + 1 + i
        element = aromatic = None
        for length in (2, 1):
            cand = body[i : i + length]
            if len(cand) != length:
                continue
            if cand in AROMATIC_BRACKET:
                element, aromatic = AROMATIC_BRACKET[cand], True
            elif cand in ELEMENTS:
                element, aromatic = cand, False
            if element is not None:
                i += length
                break
        if element is None:
            if body[i : i + 1] == "*":
                raise UnsupportedFeature("wildcard atoms are not supported", s, sym_pos)
            self.error(f"unknown element in bracket atom [{body}]", sym_pos)
        if body[i : i + 1] == "@":
            self.stereo = True
            while body[i : i + 1] == "@":
                i += 1
            if body[i : i + 2] in ("TH", "AL", "SP", "TB", "OH"):
                i += 2
                while i < len(body) and body[i].isdigit():
                    i += 1
        if body[i : i + 1] == "H":
            i += 1
            while i < len(body) and body[i].isdigit():
                i += 1
        charge = 0
        if body[i : i + 1] in ("+", "-"):
            sign = 1 if body[i] == "+" else -1
            j = i + 1
            if j < len(body) and body[j].isdigit():
                k = j
                while k < len(body) and body[k].isdigit():
                    k += 1
                charge = sign * int(body[j:k])
                i = k
            else:
                count = 1
                while j < len(body) and body[j] == body[i]:
                    count += 1
                    j += 1
                charge = sign * count
                i = j
        if body[i : i + 1] == ":":
            j = i + 1
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == i + 1:
                self.error("atom class needs digits", open_pos + 1 + i)
            i = j
        if i != len(body):
            self.error(f"unexpected {body[i]!r} in bracket atom", open_pos + 1 + i)
        self.pos = close + 1
        return self.new_atom(element, aromatic, charge)

    def build(self):
        atoms = tuple(Atom(e, ar, k, ch) for k, (e, ar, ch) in enumerate(self.atoms))
        pairs = sorted(self.bonds)
        ring = _ring_bonds(len(atoms), pairs)
        bonds = []
        for k, (i, j) in enumerate(pairs):
            order = self.bonds[(i, j)]
            if order is None:
                order = AROMATIC if atoms[i].aromatic and atoms[j].aromatic and k in ring else SINGLE
            in_ring = k in ring or order == AROMATIC
            bonds.append(Bond(i, j, order, in_ring))
        return MoleculeGraph(atoms, tuple(bonds), self.s, self.stereo)


def parse_smiles(s):
    """Parse ``s`` into a :class:`MoleculeGraph` of heavy atoms.

    Raises :class:`SmilesSyntaxError` (with ``.position``) for malformed input
    and :class:`UnsupportedFeature` for wildcards and quadruple bonds.
    """
    if not isinstance(s, str) or not s:
        raise SmilesSyntaxError("empty SMILES", s or "", 0)
    try:
        s.encode("ascii")
    except UnicodeEncodeError as exc:
        raise SmilesSyntaxError("non-ASCII character", s, exc.start) from None
    return _Parser(s).parse()
