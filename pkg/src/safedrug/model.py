"""Forward pass: patient encoder, global MPNN encoder, local bipartite encoder.

Row-vector convention throughout: a linear layer is ``x @ W + b`` with ``W``
stored ``in x out``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from safedrug.autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    gru_cell,
    gru_shapes,
    layer_norm,
    linear,
    masked_linear,
    matmul,
    mul,
    relu,
    segment_mean,
    segment_sum,
    sigmoid,
    take,
)
from safedrug.chem import MaskMatrix, parse_smiles
from safedrug.errors import ConfigError, ShapeMismatch, UnknownAtom


@dataclass
class ModelConfig:
    n_diagnoses: int
    n_procedures: int
    n_drugs: int
    n_substructures: int
    atom_vocab: tuple
    dim: int = 64
    layers: int = 2
    delta: float = 0.5
    dropout: float = 0.5
    use_mask: bool = True

    def __post_init__(self):
        self.atom_vocab = tuple(self.atom_vocab)
        if self.dim < 1 or self.layers < 1:
            raise ConfigError(f"dim and layers must be >= 1 (got {self.dim}, {self.layers})")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("n_diagnoses", "n_procedures", "n_drugs", "n_substructures"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["atom_vocab"] = list(self.atom_vocab)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def parameter_shapes(cfg):
    dim, m, s = cfg.dim, cfg.n_drugs, cfg.n_substructures
    shapes = {
        "E_d": (cfg.n_diagnoses, dim),
        "E_p": (cfg.n_procedures, dim),
        "E_a": (len(cfg.atom_vocab), dim),
        "W1": (2 * dim, dim),
        "b1": (dim,),
        "W2": (m, m),
        "b2": (m,),
        "ln.gain": (m,),
        "ln.bias": (m,),
        "W3": (dim, s),
        "b3": (s,),
        "W4": (s, m),
    }
    for prefix in ("gru_d", "gru_p"):
        for k, shape in gru_shapes(dim, dim).items():
            shapes[f"{prefix}.{k}"] = shape
    for layer in range(cfg.layers):
        shapes[f"mpnn.{layer}.W"] = (2 * dim, dim)
        shapes[f"mpnn.{layer}.b"] = (dim,)
    return dict(sorted(shapes.items()))


def init_parameters(cfg, rng, scale=0.1):
    """Uniform(-scale, scale) for every tensor except the layer-norm affine (1, 0)."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "ln.gain":
            data = np.ones(shape)
        elif name == "ln.bias":
            data = np.zeros(shape)
        else:
            data = rng.uniform(-scale, scale, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class PatientState:
    d_h: Tensor
    p_h: Tensor

    @classmethod
    def zeros(cls, dim):
        return cls(Tensor(np.zeros(dim)), Tensor(np.zeros(dim)))


@dataclass
class ForwardTrace:
    h: Tensor
    m_r: Tensor
    m_g: Tensor
    m_f: Tensor
    m_l: Tensor
    o_hat: Tensor
    m_hat: np.ndarray


@dataclass
class DrugGraphs:
    """All drug molecules packed into one disjoint graph for batched message passing.

    ``drug_of_molecule`` maps each molecule to its drug column; drugs with
    several molecules get the mean of their molecule embeddings.
    """

    atom_tokens: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    molecule_of_atom: np.ndarray
    drug_of_molecule: np.ndarray
    n_drugs: int

    @property
    def n_atoms(self):
        return len(self.atom_tokens)

    @property
    def n_molecules(self):
        return len(self.drug_of_molecule)


def atom_vocabulary(molecules):
    return tuple(sorted({a.token for mol in molecules for a in mol.atoms}))


def pack_molecules(molecules, atom_vocab, drug_of_molecule=None, drug_ids=None):
    """Pack :class:`MoleculeGraph` objects; one molecule per drug unless mapped."""
    index = {t: k for k, t in enumerate(atom_vocab)}
    if drug_of_molecule is None:
        drug_of_molecule = list(range(len(molecules)))
    tokens, src, dst, mol_of_atom = [], [], [], []
    offset = 0
    for k, mol in enumerate(molecules):
        for a in mol.atoms:
            if a.token not in index:
                drug = drug_ids[drug_of_molecule[k]] if drug_ids is not None else drug_of_molecule[k]
                raise UnknownAtom(a.token, drug)
            tokens.append(index[a.token])
            mol_of_atom.append(k)
        for b in mol.bonds:
            src.extend((offset + b.begin, offset + b.end))
            dst.extend((offset + b.end, offset + b.begin))
        offset += mol.n_atoms
    return DrugGraphs(
        np.asarray(tokens, dtype=np.intp),
        np.asarray(src, dtype=np.intp),
        np.asarray(dst, dtype=np.intp),
        np.asarray(mol_of_atom, dtype=np.intp),
        np.asarray(drug_of_molecule, dtype=np.intp),
        int(max(drug_of_molecule) + 1) if len(drug_of_molecule) else 0,
    )


def mpnn_atom_states(graphs, params, cfg):
    """Atom states after each message-passing round, from ``y^(0)`` to ``y^(L)``."""
    y = take(params["E_a"], graphs.atom_tokens)
    states = [y]
    for layer in range(cfg.layers):
        if len(graphs.src):
            # [y_i, y_j] @ W == y_i @ W_top + y_j @ W_bottom, applied per atom before the gather
            w = params[f"mpnn.{layer}.W"]
            own = matmul(y, take(w, np.arange(cfg.dim)))
            other = matmul(y, take(w, np.arange(cfg.dim, 2 * cfg.dim)))
            pre = add(add(take(own, graphs.dst), take(other, graphs.src)), params[f"mpnn.{layer}.b"])
            msg = relu(pre)
            z = segment_sum(msg, graphs.dst, graphs.n_atoms)
            y = mul(add(y, z), 0.5)
        else:
            y = mul(y, 0.5)
        states.append(y)
    return states


def mpnn_drug_memory(graphs, params, cfg):
    """E_g (|M| x dim): mean atom state per molecule, then mean over a drug's molecules."""
    y = mpnn_atom_states(graphs, params, cfg)[-1]
    per_molecule = segment_mean(y, graphs.molecule_of_atom, graphs.n_molecules)
    if graphs.n_molecules == graphs.n_drugs and np.array_equal(graphs.drug_of_molecule, np.arange(graphs.n_drugs)):
        return per_molecule
    return segment_mean(per_molecule, graphs.drug_of_molecule, graphs.n_drugs)


def encode_visit(d, p, state, params, cfg, training=False, rng=None):
    """Update the two GRU states with one visit and return ``(h, new_state)``."""
    d_e = embedding_lookup(params["E_d"], d)
    p_e = embedding_lookup(params["E_p"], p)
    if training and cfg.dropout > 0:
        d_e = dropout(d_e, cfg.dropout, True, rng)
        p_e = dropout(p_e, cfg.dropout, True, rng)
    gd = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("gru_d.")}
    gp = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("gru_p.")}
    d_h = gru_cell(d_e, state.d_h, gd)
    p_h = gru_cell(p_e, state.p_h, gp)
    h = relu(linear(concat([d_h, p_h]), params["W1"], params["b1"]))
    return h, PatientState(d_h, p_h)


def match_global(h, e_g, params):
    """``(m_r, m_g)``: sigmoid matching scores and their layer-normed residual refinement."""
    if e_g.shape[1] != h.shape[0]:
        raise ShapeMismatch(f"match_global: E_g {e_g.shape} vs h {h.shape}")
    m_r = sigmoid(matmul(e_g, h))
    m_g = layer_norm(add(m_r, linear(m_r, params["W2"], params["b2"])), params["ln.gain"], params["ln.bias"])
    return m_r, m_g


def encode_local(h, mask, params, use_mask=True):
    """``(m_f, m_l)``: substructure activations and the masked projection onto drugs."""
    m_f = sigmoid(linear(h, params["W3"], params["b3"]))
    if use_mask:
        m_l = masked_linear(m_f, params["W4"], mask)
    else:
        if params["W4"].shape != np.shape(mask):
            raise ShapeMismatch(f"encode_local: W4 {params['W4'].shape} vs mask {np.shape(mask)}")
        m_l = matmul(m_f, params["W4"])
    return m_f, m_l


def recommend(m_g, m_l, delta=0.5):
    if m_g.shape != m_l.shape:
        raise ShapeMismatch(f"recommend: m_g {m_g.shape} vs m_l {m_l.shape}")
    o_hat = sigmoid(mul(m_g, m_l))
    return o_hat, (o_hat.data > delta).astype(np.int8)


def multihot(indices, size):
    v = np.zeros(size)
    v[list(indices)] = 1.0
    return v


@dataclass
class SafeDrugModel:
    cfg: ModelConfig
    params: dict
    mask: np.ndarray
    graphs: DrugGraphs
    drug_ids: tuple = field(default=())

    @classmethod
    def build(cls, cfg, mask, molecules, rng, drug_of_molecule=None, drug_ids=None):
        """``mask`` is a :class:`MaskMatrix` or a dense 0/1 array of shape |S| x |M|."""
        entries = mask.entries if isinstance(mask, MaskMatrix) else np.asarray(mask)
        if entries.shape != (cfg.n_substructures, cfg.n_drugs):
            raise ShapeMismatch(f"mask {entries.shape} vs config ({cfg.n_substructures}, {cfg.n_drugs})")
        ids = tuple(drug_ids) if drug_ids is not None else (tuple(mask.drugs) if isinstance(mask, MaskMatrix) else ())
        graphs = pack_molecules(molecules, cfg.atom_vocab, drug_of_molecule, ids or None)
        if graphs.n_drugs != cfg.n_drugs:
            raise ShapeMismatch(f"{graphs.n_drugs} drugs have molecules, config says {cfg.n_drugs}")
        return cls(cfg, init_parameters(cfg, rng), entries.astype(np.float64), graphs, ids)

    def drug_memory(self):
        return mpnn_drug_memory(self.graphs, self.params, self.cfg)

    def forward_visit(self, visit, state, e_g, training=False, rng=None):
        d = multihot(visit.diagnoses, self.cfg.n_diagnoses)
        p = multihot(visit.procedures, self.cfg.n_procedures)
        h, state = encode_visit(d, p, state, self.params, self.cfg, training, rng)
        m_r, m_g = match_global(h, e_g, self.params)
        m_f, m_l = encode_local(h, self.mask, self.params, self.cfg.use_mask)
        o_hat, m_hat = recommend(m_g, m_l, self.cfg.delta)
        return ForwardTrace(h, m_r, m_g, m_f, m_l, o_hat, m_hat), state

    def forward_patient(self, visits, training=False, rng=None, e_g=None):
        """Traces for every visit in order, threading the GRU state."""
        if e_g is None:
            e_g = self.drug_memory()
        state = PatientState.zeros(self.cfg.dim)
        traces = []
        for visit in visits:
            trace, state = self.forward_visit(visit, state, e_g, training, rng)
            traces.append(trace)
        return traces

    def parameter_arrays(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays):
        expected = parameter_shapes(self.cfg)
        if set(arrays) != set(expected):
            raise ShapeMismatch(f"parameter names differ: {sorted(set(arrays) ^ set(expected))}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != expected[name]:
                raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs model {expected[name]}")
            self.params[name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)

    def effective_local_weights(self):
        """W4 * H for the masked model, W4 itself for the dense ablation."""
        w = self.params["W4"].data
        return w * self.mask if self.cfg.use_mask else w.copy()

    def zero_final_layers(self):
        """Zero W4 so that every score sits at sigmoid(0) = 0.5."""
        self.params["W4"].data[...] = 0.0


def molecules_for_drugs(drug_entries):
    """Parse each drug's SMILES list; returns ``(molecules, drug_of_molecule)``."""
    molecules, owner = [], []
    for j, entry in enumerate(drug_entries):
        for smi in entry.smiles:
            molecules.append(parse_smiles(smi))
            owner.append(j)
    return molecules, owner
