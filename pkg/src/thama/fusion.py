"""Two-view fusion: shared-space projection, Tucker-core bilinear fusion, Hadamard squaring.

Array functions accept a single record or a leading batch axis. The
``graph_*`` helpers emit the same computations as graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from thama.autodiff import ComputeGraph, Node
from thama.errors import ShapeError


@dataclass
class SharedProjection:
    W1: np.ndarray  # [d1', d_f]
    W2: np.ndarray  # [d2', d_f]

    def __post_init__(self):
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[1]:
            raise ShapeError(f"projections must share d_f: {self.W1.shape}, {self.W2.shape}")

    @property
    def d_f(self):
        return self.W1.shape[1]


@dataclass
class TuckerCoreFull:
    T: np.ndarray  # [d_f, d_f, d_f]

    def __post_init__(self):
        self.T = np.asarray(self.T)
        if self.T.ndim != 3 or len(set(self.T.shape)) != 1:
            raise ShapeError(f"full core must be cubic, got {self.T.shape}")

    @property
    def d_f(self):
        return self.T.shape[0]


@dataclass
class TuckerCoreFactored:
    G: np.ndarray  # [r1, r2, r3]
    A: np.ndarray  # [d_f, r1]
    B: np.ndarray  # [d_f, r2]
    C: np.ndarray  # [d_f, r3]

    def __post_init__(self):
        self.G, self.A, self.B, self.C = (np.asarray(m) for m in (self.G, self.A, self.B, self.C))
        if self.G.ndim != 3 or any(m.ndim != 2 for m in (self.A, self.B, self.C)):
            raise ShapeError("factored core needs a 3-way G and matrices A, B, C")
        d_f = self.A.shape[0]
        if self.B.shape[0] != d_f or self.C.shape[0] != d_f:
            raise ShapeError(f"factor rows differ: {self.A.shape}, {self.B.shape}, {self.C.shape}")
        ranks = (self.A.shape[1], self.B.shape[1], self.C.shape[1])
        if self.G.shape != ranks:
            raise ShapeError(f"G shape {self.G.shape} does not match factor ranks {ranks}")
        if not all(1 <= r <= d_f for r in ranks):
            raise ShapeError(f"ranks {ranks} must lie in [1, {d_f}]")

    @property
    def d_f(self):
        return self.A.shape[0]

    @property
    def ranks(self):
        return self.G.shape


@dataclass
class FusedVector:
    Z: np.ndarray
    H: np.ndarray

    @classmethod
    def from_z(cls, z):
        return cls(Z=z, H=hadamard_square(z))


def project(x_flat: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Map a flattened view into the shared space: ``F = W^T x``."""
    x_flat = np.asarray(x_flat)
    if W.ndim != 2 or x_flat.shape[-1] != W.shape[0]:
        raise ShapeError(f"project: x has dim {x_flat.shape[-1]}, W is {W.shape}")
    return x_flat @ W


def _check_pair(F1, F2, d_f):
    if F1.shape[-1] != d_f or F2.shape[-1] != d_f or F1.shape[:-1] != F2.shape[:-1]:
        raise ShapeError(f"fusion inputs {F1.shape}, {F2.shape} do not match d_f={d_f}")


def tucker_fuse_full(F1: np.ndarray, F2: np.ndarray, core: TuckerCoreFull) -> np.ndarray:
    """``Z_k = sum_ij T_ijk F1_i F2_j``."""
    F1, F2 = np.asarray(F1), np.asarray(F2)
    _check_pair(F1, F2, core.d_f)
    return np.einsum("...i,...j,ijk->...k", F1, F2, core.T, optimize=True)


def tucker_fuse_factored(F1: np.ndarray, F2: np.ndarray, core: TuckerCoreFactored) -> np.ndarray:
    """Contract G with ``A^T F1`` and ``B^T F2``, then map the r3-vector through C."""
    F1, F2 = np.asarray(F1), np.asarray(F2)
    _check_pair(F1, F2, core.d_f)
    p1 = F1 @ core.A
    p2 = F2 @ core.B
    g = np.einsum("...a,...b,abc->...c", p1, p2, core.G, optimize=True)
    return g @ core.C.T


def reconstruct_core(core: TuckerCoreFactored) -> TuckerCoreFull:
    """``T_ijk = sum_abc G_abc A_ia B_jb C_kc``."""
    T = np.einsum("abc,ia,jb,kc->ijk", core.G, core.A, core.B, core.C, optimize=True)
    return TuckerCoreFull(T)


def hadamard_square(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z)
    return Z * Z


def concat_fuse(x1_flat: np.ndarray, x2_flat: np.ndarray) -> np.ndarray:
    x1_flat, x2_flat = np.asarray(x1_flat), np.asarray(x2_flat)
    if x1_flat.shape[-1] < 1 or x2_flat.shape[-1] < 1:
        raise ShapeError("concat_fuse: both views need at least one feature")
    return np.concatenate([x1_flat, x2_flat], axis=-1)


# graph builders


def graph_project(g: ComputeGraph, x_flat: Node, W: Node) -> Node:
    return g.matmul(x_flat, W)


def graph_tucker_full(g: ComputeGraph, F1: Node, F2: Node, T: Node) -> Node:
    return g.einsum("i,j,ijk->k", F1, F2, T, name="tucker_z")


def graph_tucker_factored(g: ComputeGraph, F1: Node, F2: Node, G: Node, A: Node, B: Node, C: Node) -> Node:
    p1 = g.matmul(F1, A)
    p2 = g.matmul(F2, B)
    inner = g.einsum("a,b,abc->c", p1, p2, G)
    return g.einsum("c,kc->k", inner, C, name="tucker_z")


def graph_hadamard_square(g: ComputeGraph, Z: Node) -> Node:
    return g.mul(Z, Z, name="hadamard")
