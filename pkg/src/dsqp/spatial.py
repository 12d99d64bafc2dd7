"""Sparse spatial-weight storage, BFS block decomposition, and block solvers.

The structural matrix (I - diag(rho) W) decouples over the connected
components of the symmetrized adjacency graph, so factorizations, solves,
log-determinants, and the latent-state filtering all run per block.  Blocks
are found once by breadth-first search; LU factors are cached per block and
refreshed only when the spatial coefficients touching that block change.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, SingularSystem

__all__ = [
    "SpatialWeights",
    "bfs_blockalize",
    "BlockSolver",
    "solve_system",
    "log_det",
    "operator_norm_estimates",
    "rho_intervals",
    "load_weights",
    "save_weights",
]

# pivots below this fraction of the largest pivot are treated as singular
PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class SpatialWeights:
    """Sparse N x N spatial weight matrix with zero diagonal.

    ``blocks`` and ``permutation`` are populated by :func:`bfs_blockalize`:
    blocks partition the unit set into connected components (descending size)
    and ``permutation`` lists units block by block, so W permuted to that
    order is block diagonal.
    """

    n: int
    rows: np.ndarray  # int array of source indices
    cols: np.ndarray  # int array of target indices
    values: np.ndarray  # float array of weights
    row_normalized: bool = False
    blocks: tuple[tuple[int, ...], ...] = field(default=())
    permutation: np.ndarray | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape):
            raise DataError("weight triplets must have matching lengths")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n):
            raise DataError("weight row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n):
            raise DataError("weight column index out of range")
        if np.any(rows == cols):
            raise DataError("diagonal weights must be absent (w_ii = 0)")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)
        if self.row_normalized:
            sums = np.zeros(self.n)
            np.add.at(sums, rows, values)
            bad = np.abs(sums - 1.0) > 1e-12
            # rows with no entries are exempt from the sum-to-one contract
            nonempty = np.zeros(self.n, dtype=bool)
            nonempty[rows] = True
            if np.any(bad & nonempty):
                raise DataError("row_normalized is set but some row sums differ from 1")

    @classmethod
    def from_dense(cls, w: np.ndarray, row_normalized: bool = False) -> "SpatialWeights":
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DataError("dense weight matrix must be square")
        mask = w != 0.0
        np.fill_diagonal(mask, False)
        rows, cols = np.nonzero(mask)
        return cls(w.shape[0], rows, cols, w[rows, cols], row_normalized=row_normalized)

    def to_sparse(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def normalize_rows(self) -> "SpatialWeights":
        """Scale each nonempty row to sum to one."""
        sums = np.zeros(self.n)
        np.add.at(sums, self.rows, self.values)
        scale = np.where(sums == 0.0, 1.0, sums)
        values = self.values / scale[self.rows]
        return replace(self, values=values, row_normalized=True, blocks=self.blocks,
                       permutation=self.permutation)

    @property
    def n_edges(self) -> int:
        return int(self.values.size)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))


def bfs_blockalize(w: SpatialWeights) -> SpatialWeights:
    """Populate connected components of the symmetrized graph via BFS.

    Components are defined on the pattern of W + W' so that the permuted
    system is block diagonal even for asymmetric weight matrices.  Blocks are
    sorted by descending size (ties by smallest member).
    """
    n = w.n
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for i, j in zip(w.rows, w.cols):
        adjacency[i].append(int(j))
        adjacency[j].append(int(i))

    visited = np.zeros(n, dtype=bool)
    blocks: list[tuple[int, ...]] = []
    for start in range(n):
        if visited[start]:
            continue
        queue = deque([start])
        visited[start] = True
        members = [start]
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                if not visited[v]:
                    visited[v] = True
                    members.append(v)
                    queue.append(v)
        blocks.append(tuple(sorted(members)))

    blocks.sort(key=lambda b: (-len(b), b[0]))
    permutation = np.concatenate([np.asarray(b, dtype=np.int64) for b in blocks]) if blocks \
        else np.empty(0, dtype=np.int64)
    return replace(w, blocks=tuple(blocks), permutation=permutation)


def _ensure_blocks(w: SpatialWeights) -> SpatialWeights:
    return w if w.blocks else bfs_blockalize(w)


class BlockSolver:
    """Per-block LU factorizations of (I - diag(rho) W), cached until rho changes.

    Singleton blocks (units with no edges) reduce to the scalar identity and
    skip factorization entirely.
    """

    def __init__(self, w: SpatialWeights, rho: np.ndarray):
        w = _ensure_blocks(w)
        self.w = w
        self.n = w.n
        self.blocks = [np.asarray(b, dtype=np.int64) for b in w.blocks]
        self.block_of = np.empty(w.n, dtype=np.int64)
        for bi, members in enumerate(self.blocks):
            self.block_of[members] = bi
        csr = w.to_sparse()
        # csc submatrices per block, kept for refactorization
        self._w_blk = [csr[m][:, m].tocsc() for m in self.blocks]
        self._lu: list = [None] * len(self.blocks)
        self._logdet = np.zeros(len(self.blocks))
        self.rho = np.array(rho, dtype=np.float64, copy=True)
        if self.rho.shape != (w.n,):
            raise ValueError("rho must have length N")
        for bi in range(len(self.blocks)):
            self._factorize(bi)

    def _factorize(self, bi: int) -> None:
        members = self.blocks[bi]
        m = members.size
        if m == 1:
            self._lu[bi] = None
            self._logdet[bi] = 0.0
            return
        mat = sp.identity(m, format="csc") - sp.diags(self.rho[members]) @ self._w_blk[bi]
        try:
            lu = spla.splu(mat.tocsc())
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise SingularSystem(f"block {bi} is singular: {exc}", block=bi) from None
        diag = lu.U.diagonal()
        absd = np.abs(diag)
        if absd.min() < PIVOT_RTOL * max(absd.max(), 1.0):
            raise SingularSystem(f"block {bi} is numerically singular", block=bi)
        self._lu[bi] = lu
        self._logdet[bi] = float(np.sum(np.log(absd)))

    def update_rho(self, rho: np.ndarray) -> None:
        """Refactorize only the blocks whose coefficients changed."""
        rho = np.asarray(rho, dtype=np.float64)
        changed = np.nonzero(rho != self.rho)[0]
        if changed.size == 0:
            return
        self.rho = rho.copy()
        for bi in np.unique(self.block_of[changed]):
            self._factorize(int(bi))

    def update_unit(self, i: int, value: float) -> None:
        if self.rho[i] == value:
            return
        self.rho[i] = value
        self._factorize(int(self.block_of[i]))

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Solve (I - diag(rho) W) z = rhs columnwise; rhs is (N,) or (N, k)."""
        rhs = np.asarray(rhs, dtype=np.float64)
        squeeze = rhs.ndim == 1
        if squeeze:
            rhs = rhs[:, None]
        out = np.empty_like(rhs)
        trans = "T" if transpose else "N"
        for bi, members in enumerate(self.blocks):
            if self._lu[bi] is None:
                out[members] = rhs[members]
            else:
                out[members] = self._lu[bi].solve(rhs[members], trans=trans)
        return out[:, 0] if squeeze else out

    def solve_block(self, bi: int, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self._lu[bi] is None:
            return np.asarray(rhs, dtype=np.float64).copy()
        return self._lu[bi].solve(np.asarray(rhs, dtype=np.float64),
                                  trans="T" if transpose else "N")

    def log_det(self) -> float:
        """log |det(I - diag(rho) W)| summed over blocks."""
        return float(self._logdet.sum())

    def log_det_block(self, bi: int) -> float:
        return float(self._logdet[bi])

    def unit_block(self, i: int) -> int:
        return int(self.block_of[i])

    def block_members(self, bi: int) -> np.ndarray:
        return self.blocks[bi]

    def rank_one_det_factor(self, i: int) -> float:
        """g such that log|det| at rho_i = v equals log|det| + log|1 - (v - rho_i) g|.

        Follows from the matrix determinant lemma: moving unit i's coefficient
        changes only row i of the block system by a rank-one term.
        """
        bi = self.unit_block(i)
        members = self.blocks[bi]
        if members.size == 1:
            return 0.0
        local = int(np.searchsorted(members, i))
        e = np.zeros(members.size)
        e[local] = 1.0
        col = self.solve_block(bi, e)
        w_row = np.asarray(self._w_blk[bi][local].todense()).ravel()
        return float(w_row @ col)

    def as_linear_operator(self, transpose: bool = False) -> spla.LinearOperator:
        """The solve operator (I - diag(rho) W)^{-1} as a LinearOperator."""
        return spla.LinearOperator(
            (self.n, self.n),
            matvec=lambda v: self.solve(v, transpose=transpose),
            matmat=lambda m: self.solve(m, transpose=transpose),
        )


def solve_system(rho: np.ndarray, w: SpatialWeights, rhs: np.ndarray) -> np.ndarray:
    """One-shot blockwise solve of (I - diag(rho) W) z = rhs."""
    return BlockSolver(w, rho).solve(rhs)


def log_det(rho: np.ndarray, w: SpatialWeights) -> float:
    """log |det(I - diag(rho) W)| from block LU pivots."""
    return BlockSolver(w, rho).log_det()


def operator_norm_estimates(rho: np.ndarray, w: SpatialWeights) -> dict:
    """Hager-style 1-norm and inf-norm estimates of the solve operator.

    Diagnostics only; large values flag a poorly conditioned spatial system.
    """
    solver = BlockSolver(w, rho)
    one = float(spla.onenormest(solver.as_linear_operator()))
    # ||A||_inf == ||A'||_1
    inf = float(spla.onenormest(solver.as_linear_operator(transpose=True)))
    return {"one_norm": one, "inf_norm": inf}


def rho_intervals(w: SpatialWeights, margin: float = 0.995) -> np.ndarray:
    """Per-unit open intervals for the contemporaneous spatial coefficient.

    If every unit keeps |rho_i| * sum_j |w_ij| < 1 the system matrix is
    strictly diagonally dominant, hence invertible, for the whole sweep.  For
    a row-normalized W this is the familiar (-1, 1) interval.  Units with an
    empty row are unconstrained by invertibility; they get the widest interval
    seen among constrained units (or (-1, 1) scaled when none exist).
    """
    abs_sums = np.zeros(w.n)
    np.add.at(abs_sums, w.rows, np.abs(w.values))
    bounds = np.empty(w.n)
    constrained = abs_sums > 0
    bounds[constrained] = margin / abs_sums[constrained]
    if np.any(constrained):
        bounds[~constrained] = bounds[constrained].max()
    else:
        bounds[:] = margin
    return np.stack([-bounds, bounds], axis=1)


def save_weights(w: SpatialWeights, csv_path: str | Path) -> None:
    """Write triplets (i, j, w) 0-indexed plus a JSON header alongside."""
    csv_path = Path(csv_path)
    with open(csv_path, "w") as fh:
        fh.write("i,j,w\n")
        for i, j, v in zip(w.rows, w.cols, w.values):
            fh.write(f"{i},{j},{v:.17g}\n")
    header = {"n": w.n, "row_normalized": w.row_normalized}
    csv_path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def load_weights(csv_path: str | Path, header_path: str | Path | None = None) -> SpatialWeights:
    """Load the CSV-triplet + JSON-header weight file pair."""
    csv_path = Path(csv_path)
    header_path = Path(header_path) if header_path else csv_path.with_suffix(".json")
    if not header_path.exists():
        raise DataError(f"weight header not found: {header_path}")
    header = json.loads(header_path.read_text())
    if "n" not in header:
        raise DataError("weight header must declare 'n'")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        rows = cols = np.empty(0, dtype=np.int64)
        values = np.empty(0)
    else:
        rows = data[:, 0].astype(np.int64)
        cols = data[:, 1].astype(np.int64)
        values = data[:, 2]
    return SpatialWeights(
        int(header["n"]), rows, cols, values,
        row_normalized=bool(header.get("row_normalized", False)),
    )
