"""Rule-table fragmentation into substructures, with deterministic keys.

Only acyclic single bonds are ever cut. The default rule table is a small
BRICS-inspired subset:

``heteroatom``
    at least one endpoint is a heteroatom (N, O, S by default);
``ring_chain``
    exactly one endpoint is a ring atom.

Each connected component of the cut graph becomes one :class:`Substructure`.
Its key is a SMILES-like string produced by a depth-first walk starting from
the atom with the smallest ``(token, degree)``; neighbour order comes from a
Weisfeiler-Lehman refinement and the lexicographically smallest walk over
tied start atoms is kept. This is not a full canonization: fragments with
unusual symmetry may in rare cases receive more than one key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from safedrug.chem.smiles import BOND_CHAR, SINGLE


@dataclass(frozen=True)
class Substructure:
    canonical_key: str
    atom_count: int
    atom_indices: tuple = field(default=(), compare=False)


def _heteroatom_rule(mol, bond, ring_atoms, rules):
    return (
        mol.atoms[bond.begin].element in rules.heteroatoms
        or mol.atoms[bond.end].element in rules.heteroatoms
    )


def _ring_chain_rule(mol, bond, ring_atoms, rules):
    return (bond.begin in ring_atoms) != (bond.end in ring_atoms)


RULES = {"heteroatom": _heteroatom_rule, "ring_chain": _ring_chain_rule}


@dataclass(frozen=True)
class FragmentationRuleSet:
    """Which rules cut a bond; a bond is cut when any listed rule fires."""

    rules: tuple = ("heteroatom", "ring_chain")
    heteroatoms: frozenset = frozenset({"N", "O", "S"})

    def __post_init__(self):
        unknown = [r for r in self.rules if r not in RULES]
        if unknown:
            raise ValueError(f"unknown fragmentation rules {unknown}; known: {sorted(RULES)}")

    def cuts(self, mol, bond, ring_atoms):
        if bond.order != SINGLE or bond.in_ring:
            return False
        return any(RULES[name](mol, bond, ring_atoms, self) for name in self.rules)


DEFAULT_RULES = FragmentationRuleSet()


def ring_atom_set(mol):
    out = set()
    for b in mol.bonds:
        if b.in_ring:
            out.update((b.begin, b.end))
    return out


def cut_bonds(mol, rules=DEFAULT_RULES):
    ring_atoms = ring_atom_set(mol)
    return [b for b in mol.bonds if rules.cuts(mol, b, ring_atoms)]


def fragment(mol, rules=DEFAULT_RULES):
    """Split ``mol`` at every bond matched by ``rules``; one entry per component."""
    cut = {b.pair for b in cut_bonds(mol, rules)}
    kept = [b for b in mol.bonds if b.pair not in cut]
    adj = {i: [] for i in range(mol.n_atoms)}
    for b in kept:
        adj[b.begin].append(b)
        adj[b.end].append(b)
    seen, out = set(), []
    for start in range(mol.n_atoms):
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            i = stack.pop()
            comp.append(i)
            for b in adj[i]:
                j = b.end if b.begin == i else b.begin
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        comp.sort()
        out.append(Substructure(canonical_key(mol, comp, kept), len(comp), tuple(comp)))
    return out


def _atom_text(atom):
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        mag = "" if abs(atom.charge) == 1 else str(abs(atom.charge))
        return f"[{atom.token}{sign}{mag}]"
    return atom.token


def canonical_key(mol, atom_indices=None, bonds=None):
    """Deterministic key of the subgraph on ``atom_indices`` using ``bonds``."""
    if atom_indices is None:
        atom_indices = range(mol.n_atoms)
    members = sorted(atom_indices)
    local = {a: k for k, a in enumerate(members)}
    bonds = mol.bonds if bonds is None else bonds
    nbrs = [[] for _ in members]
    for b in bonds:
        if b.begin in local and b.end in local:
            i, j = local[b.begin], local[b.end]
            ch = BOND_CHAR[b.order]
            nbrs[i].append((j, ch))
            nbrs[j].append((i, ch))
    atoms = [mol.atoms[a] for a in members]
    text = [_atom_text(a) for a in atoms]
    rank = _refine(text, nbrs)

    def order_key(item):
        j, ch = item
        return (ch, rank[j], text[j], j)

    for lst in nbrs:
        lst.sort(key=order_key)

    base = [(text[i], len(nbrs[i])) for i in range(len(members))]
    best = min(base)
    starts = [i for i in range(len(members)) if base[i] == best]
    return min(_walk(s, text, nbrs) for s in starts)


def _refine(text, nbrs):
    labels = [(t, len(n)) for t, n in zip(text, nbrs)]
    rank = _dense_rank(labels)
    for _ in range(len(text)):
        labels = [(rank[i], tuple(sorted((ch, rank[j]) for j, ch in nbrs[i]))) for i in range(len(text))]
        new = _dense_rank(labels)
        if len(set(new)) == len(set(rank)):
            return new
        rank = new
    return rank


def _dense_rank(labels):
    table = {lab: k for k, lab in enumerate(sorted(set(labels)))}
    return [table[lab] for lab in labels]


def _walk(start, text, nbrs):
    parent = {start: None}
    order = [start]
    children = {start: []}
    closures = []  # (ancestor, descendant, bond char)
    seen_edges = set()

    def visit(u):
        for v, ch in nbrs[u]:
            edge = (min(u, v), max(u, v))
            if edge in seen_edges:
                continue
            seen_edges.add(edge)
            if v in parent:
                closures.append((v, u, ch))
            else:
                parent[v] = u
                children[v] = []
                children[u].append((v, ch))
                order.append(v)
                visit(v)

    visit(start)
    opens = {i: [] for i in order}
    closes = {i: [] for i in order}
    for k, (anc, desc, ch) in enumerate(closures):
        opens[anc].append(k)
        closes[desc].append(k)
    free, assigned = [], {}
    next_number = [1]

    def number():
        if free:
            free.sort()
            return free.pop(0)
        n = next_number[0]
        next_number[0] += 1
        return n

    def digits(n):
        return str(n) if n < 10 else f"%{n}"

    out = []

    def emit(u):
        out.append(text[u])
        for k in closes[u]:
            n = assigned.pop(k)
            out.append(closures[k][2] + digits(n))
            free.append(n)
        for k in opens[u]:
            n = assigned[k] = number()
            out.append(digits(n))
        kids = children[u]
        for idx, (v, ch) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(ch)
            emit(v)
            if not last:
                out.append(")")

    emit(start)
    return "".join(out)

