"""Flat-index bookkeeping shared by the vectorized SMC, VB and exact paths.

For every nonzero visible cell of X and every latent configuration, the
layout stores the flat offset of the matching family and parent cell of each
node, so family tables can live in dense per-family arrays.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .model import ModelSpec, PriorSpec, alpha_family
from .tensor import SparseCountTensor

DEFAULT_LATENT_CAP = 10**6


class LatentSpaceTooLarge(ValueError):
    pass


def _strides(shape):
    out = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        out[k] = out[k + 1] * shape[k + 1]
    return out


class Layout:
    def __init__(self, spec: ModelSpec, prior: PriorSpec, X: SparseCountTensor,
                 latent_cap: int = DEFAULT_LATENT_CAP):
        if X.dims != tuple(spec.nodes[v].card for v in spec.visible):
            raise ValueError(
                f"tensor dims {X.dims} do not match visible cardinalities "
                f"{tuple(spec.nodes[v].card for v in spec.visible)}"
            )
        self.spec, self.prior = spec, prior
        latent = spec.latent
        n_latent = math.prod(spec.nodes[m].card for m in latent)
        if n_latent > latent_cap:
            raise LatentSpaceTooLarge(
                f"latent block has {n_latent} configurations (cap {latent_cap})"
            )
        items = X.items()
        self.cells = np.array([idx for idx, _ in items], dtype=np.int64).reshape(len(items), len(X.dims))
        self.counts = np.array([c for _, c in items], dtype=np.int64)
        self.latent = latent
        self.latent_configs = np.array(
            list(itertools.product(*(range(spec.nodes[m].card) for m in latent))), dtype=np.int64
        ).reshape(n_latent, len(latent))
        self.n_cells, self.n_latent = len(items), n_latent
        self.total = int(self.counts.sum())

        # coordinate of node m for (cell, latent config): (nnz, L)
        coord = {}
        for k, v in enumerate(spec.visible):
            coord[v] = np.broadcast_to(self.cells[:, k:k + 1], (self.n_cells, n_latent))
        for k, m in enumerate(latent):
            coord[m] = np.broadcast_to(self.latent_configs[None, :, k], (self.n_cells, n_latent))

        self.alpha = [alpha_family(spec, prior, n) for n in range(spec.n_nodes)]
        self.fam_size, self.par_size = [], []
        self.fam_idx, self.par_idx = [], []
        self.fam_latent, self.par_latent = [], []
        lat = set(latent)
        for n in range(spec.n_nodes):
            fa, pa = spec.family(n), spec.parents[n]
            fshape, pshape = spec.family_shape(n), spec.parent_shape(n)
            self.fam_size.append(math.prod(fshape))
            self.par_size.append(math.prod(pshape))
            fi = np.zeros((self.n_cells, n_latent), dtype=np.int64)
            for m, s in zip(fa, _strides(fshape)):
                fi = fi + coord[m] * s
            pi = np.zeros((self.n_cells, n_latent), dtype=np.int64)
            for m, s in zip(pa, _strides(pshape)):
                pi = pi + coord[m] * s
            self.fam_idx.append(np.ascontiguousarray(fi))
            self.par_idx.append(np.ascontiguousarray(pi))
            self.fam_latent.append(bool(set(fa) & lat))
            self.par_latent.append(bool(set(pa) & lat))

    def full_cell(self, cell: int, ell: int) -> tuple:
        """Full index tuple of visible cell ``cell`` with latent config ``ell``."""
        c = [0] * self.spec.n_nodes
        for k, v in enumerate(self.spec.visible):
            c[v] = int(self.cells[cell, k])
        for k, m in enumerate(self.latent):
            c[m] = int(self.latent_configs[ell, k])
        return tuple(c)

    def unflatten_family(self, n: int, table: np.ndarray) -> np.ndarray:
        """Reshape a flat family table (..., size) to (..., I_n, *parent cards)."""
        return table.reshape(table.shape[:-1] + self.spec.family_shape(n))
