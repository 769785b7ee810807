"""Per-batch token graph: sequential, shared-token, and translation edges,
cross-lingual edge retention sampling, and the symmetric-normalized adjacency
used by graph-convolution layers.

Nodes are the flattened batch positions (``B * S``); PAD positions are marked
invalid and never touched by an edge. Edges are stored unordered as
``(min(i, j), max(i, j))`` with an origin tag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import SPECIAL_IDS
from .errors import ContractError
from .lexicon import Lexicon

SEQUENTIAL = "sequential"
SHARED_TOKEN = "shared_token"
TRANSLATION = "translation"

CROSS_LINGUAL_ORIGINS = (SHARED_TOKEN, TRANSLATION)

MAX_DENSE_NODES = 4096


@dataclass
class TokenGraph:
    num_nodes: int
    edges: set = field(default_factory=set)                 # {(i, j)} with i < j
    edge_origin: dict = field(default_factory=dict)          # (i, j) -> origin tag
    node_valid: np.ndarray = None                            # bool mask, False for PAD

    def add_edge(self, i: int, j: int, origin: str):
        if i == j:
            return
        if not (self.node_valid[i] and self.node_valid[j]):
            raise ContractError(f"edge ({i}, {j}) touches an invalid node")
        key = (i, j) if i < j else (j, i)
        if key not in self.edges:
            self.edges.add(key)
            self.edge_origin[key] = origin

    def edges_by_origin(self, *origins):
        return [e for e in sorted(self.edges) if self.edge_origin[e] in origins]

    def cross_lingual_edges(self):
        return self.edges_by_origin(*CROSS_LINGUAL_ORIGINS)

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, j in sorted(self.edges):
                fh.write(f"{i} {j} {self.edge_origin[(i, j)]}\n")


def build_token_graph(
    token_ids: np.ndarray,
    lengths,
    spans,
    languages,
    lex: Lexicon | None = None,
    words=None,
) -> TokenGraph:
    """Build the per-batch token graph.

    Args:
        token_ids: int array of shape (B, S), PAD-padded.
        lengths: per-sentence valid length (CLS included).
        spans: per-sentence list of word [start, end) piece spans.
        languages: per-sentence "HRL" / "LRL" tag.
        lex: LRL word -> HRL word map used for translation edges.
        words: per-sentence surface word lists, aligned with spans; required
            for translation edges.

    Edge kinds: (a) sequential edges between consecutive valid positions
    within each sentence (CLS heads the chain); (b) shared-token edges
    between every pair of positions in *different* sentences holding the same
    non-special token id; (c) translation edges linking every piece position
    of an LRL word to every piece position of its HRL translation in another
    sentence. CLS participates only in the sequential chain.
    """
    token_ids = np.asarray(token_ids)
    B, S = token_ids.shape
    L = B * S
    lengths = list(lengths)
    if len(lengths) != B or len(spans) != B or len(languages) != B:
        raise ContractError("lengths/spans/languages must each have one entry per sentence")

    node_valid = np.zeros(L, dtype=bool)
    for b, ln in enumerate(lengths):
        if ln > S:
            raise ContractError(f"sentence {b}: length {ln} exceeds padded width {S}")
        covered = sum(e - s for s, e in spans[b])
        if covered != ln - 1:
            raise ContractError(
                f"sentence {b}: spans cover {covered} positions but length (minus CLS) is {ln - 1}")
        node_valid[b * S: b * S + ln] = True

    g = TokenGraph(num_nodes=L, node_valid=node_valid)

    # sequential edges, CLS included as sequence head
    for b, ln in enumerate(lengths):
        base = b * S
        for p in range(ln - 1):
            g.add_edge(base + p, base + p + 1, SEQUENTIAL)

    # shared-token edges across sentences
    positions_by_id: dict[int, list[tuple[int, int]]] = {}
    for b, ln in enumerate(lengths):
        for p in range(ln):
            tid = int(token_ids[b, p])
            if tid in SPECIAL_IDS:
                continue
            positions_by_id.setdefault(tid, []).append((b, b * S + p))
    for tid, occ in positions_by_id.items():
        for a in range(len(occ)):
            for c in range(a + 1, len(occ)):
                if occ[a][0] != occ[c][0]:
                    g.add_edge(occ[a][1], occ[c][1], SHARED_TOKEN)

    # translation edges via dictionary surface lookup
    if lex is not None and words is not None:
        hrl_word_pos: dict[str, list[tuple[int, list[int]]]] = {}
        for b in range(B):
            if languages[b] != "HRL":
                continue
            for w, (s, e) in zip(words[b], spans[b]):
                hrl_word_pos.setdefault(w, []).append((b, [b * S + p for p in range(s, e)]))
        for b in range(B):
            if languages[b] != "LRL":
                continue
            for w, (s, e) in zip(words[b], spans[b]):
                trans = lex.get(w)
                if trans is None:
                    continue
                lrl_nodes = [b * S + p for p in range(s, e)]
                for hb, hrl_nodes in hrl_word_pos.get(trans, ()):
                    if hb == b:
                        continue
                    for u in lrl_nodes:
                        for v in hrl_nodes:
                            key = (u, v) if u < v else (v, u)
                            if g.edge_origin.get(key) == SHARED_TOKEN:
                                # surface-shared word pair: the translation
                                # relation is the stronger signal
                                g.edge_origin[key] = TRANSLATION
                            else:
                                g.add_edge(u, v, TRANSLATION)
    return g


def apply_edge_retention(g: TokenGraph, rho: float, rng: np.random.Generator) -> TokenGraph:
    """Keep exactly ``round(rho * m)`` of the m cross-lingual edges.

    Sequential edges are always retained; rho=1 is the identity, rho=0 removes
    every cross-lingual edge. Sampling is uniform and reproducible per rng.
    """
    if not (0.0 <= rho <= 1.0):
        raise ContractError(f"rho must be in [0, 1], got {rho}")
    cross = g.cross_lingual_edges()
    m = len(cross)
    keep_n = int(round(rho * m))
    if keep_n == m:
        return g
    keep_idx = rng.choice(m, size=keep_n, replace=False) if keep_n else np.array([], dtype=int)
    keep = {cross[i] for i in keep_idx}
    out = TokenGraph(num_nodes=g.num_nodes, node_valid=g.node_valid.copy())
    for e in g.edges:
        origin = g.edge_origin[e]
        if origin == SEQUENTIAL or e in keep:
            out.edges.add(e)
            out.edge_origin[e] = origin
    return out


def normalize_adjacency(g: TokenGraph, dtype=np.float32) -> np.ndarray:
    """Symmetric renormalized adjacency D̃^{-1/2} (A + I) D̃^{-1/2}.

    Restricted to valid nodes; invalid (PAD) rows reduce to a pure self-loop
    so they carry no cross influence.
    """
    L = g.num_nodes
    if L > MAX_DENSE_NODES:
        raise ContractError(
            f"dense adjacency limited to {MAX_DENSE_NODES} nodes, got {L}")
    A = np.eye(L, dtype=dtype)
    for i, j in g.edges:
        A[i, j] = 1.0
        A[j, i] = 1.0
    deg = A.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    A_hat = A * dinv[:, None] * dinv[None, :]
    invalid = ~g.node_valid
    A_hat[invalid, :] = 0.0
    A_hat[:, invalid] = 0.0
    A_hat[invalid, invalid] = 1.0
    return A_hat


def adjacency_mask(g: TokenGraph, dtype=np.float32) -> np.ndarray:
    """Additive attention mask over node pairs: 0 on edges and self-loops,
    a large negative elsewhere. Used by the graph-attention layer."""
    L = g.num_nodes
    if L > MAX_DENSE_NODES:
        raise ContractError(
            f"dense adjacency limited to {MAX_DENSE_NODES} nodes, got {L}")
    neg = np.array(-1e30 if dtype == np.float64 else -1e30, dtype=dtype)
    M = np.full((L, L), neg, dtype=dtype)
    idx = np.arange(L)
    M[idx, idx] = 0.0
    for i, j in g.edges:
        M[i, j] = 0.0
        M[j, i] = 0.0
    return M


def cross_lingual_edge_stats(g: TokenGraph) -> dict:
    """Measured statistic: translation edges between multi-piece words should
    be a minority of cross-lingual connections on realistic batches."""
    counts = {SEQUENTIAL: 0, SHARED_TOKEN: 0, TRANSLATION: 0}
    for e in g.edges:
        counts[g.edge_origin[e]] += 1
    total = sum(counts.values())
    cross = counts[SHARED_TOKEN] + counts[TRANSLATION]
    return {
        "total_edges": total,
        "sequential": counts[SEQUENTIAL],
        "shared_token": counts[SHARED_TOKEN],
        "translation": counts[TRANSLATION],
        "cross_lingual": cross,
        "translation_fraction_of_total": (counts[TRANSLATION] / total) if total else 0.0,
    }
