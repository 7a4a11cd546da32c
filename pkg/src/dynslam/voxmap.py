"""Sparse voxel grid of learnable embeddings with trilinear interpolation.

Embeddings sit on grid vertices ``voxel_size * (i, j, k)``.  A point inside
cell ``floor(p / voxel_size)`` is interpolated from that cell's 8 corners;
if any corner is missing the point is *uncovered*.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import backproject

_OFFSET = 1 << 20
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)
_MAGIC = b"VXMAP\x00"
_VERSION = 1


def _keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64) + _OFFSET
    return (idx[..., 0] << 42) | (idx[..., 1] << 21) | idx[..., 2]


class VoxelMap:
    def __init__(self, voxel_size: float = 0.2, embedding_dim: int = 16, init_std: float = 0.01):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.embedding_dim = int(embedding_dim)
        self.init_std = init_std
        self.embeddings = ad.Param(np.zeros((0, self.embedding_dim)), name="embeddings")
        self.indices = np.zeros((0, 3), dtype=np.int64)
        self.allocation_log: list[tuple[int, np.ndarray]] = []
        self._sorted_keys = np.zeros(0, dtype=np.int64)
        self._sorted_rows = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    def _reindex(self):
        keys = _keys(self.indices)
        order = np.argsort(keys)
        self._sorted_keys = keys[order]
        self._sorted_rows = order

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """Rows of the embedding table for integer grid indices (..., 3); -1 if unallocated."""
        keys = _keys(idx)
        if len(self._sorted_keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        found = self._sorted_keys[pos] == keys
        return np.where(found, self._sorted_rows[pos], -1)

    def embedding(self, idx) -> np.ndarray:
        row = int(self.lookup(np.asarray(idx)[None])[0])
        if row < 0:
            raise KeyError(tuple(idx))
        return self.embeddings.value[row]

    def set_embedding(self, idx, value) -> None:
        row = int(self.lookup(np.asarray(idx)[None])[0])
        if row < 0:
            raise KeyError(tuple(idx))
        self.embeddings.value[row] = value

    def allocate_indices(self, idx: np.ndarray, rng: np.random.Generator | None = None, frame_index: int = -1) -> int:
        """Allocate grid vertices (N, 3) that are not present yet."""
        idx = np.unique(np.asarray(idx, dtype=np.int64).reshape(-1, 3), axis=0)
        new = idx[self.lookup(idx) < 0]
        if len(new) == 0:
            return 0
        if rng is None:
            rng = np.random.default_rng(0)
        self.embeddings.append_rows(rng.normal(0.0, self.init_std, size=(len(new), self.embedding_dim)))
        self.indices = np.concatenate([self.indices, new])
        self.allocation_log.append((frame_index, new))
        self._reindex()
        return len(new)

    def allocate_points(self, points: np.ndarray, rng=None, frame_index: int = -1) -> int:
        """Allocate the 8 corners of every cell that contains one of ``points``."""
        cells = np.floor(np.asarray(points) / self.voxel_size).astype(np.int64)
        cells = np.unique(cells.reshape(-1, 3), axis=0)
        corners = (cells[:, None, :] + _CORNERS[None]).reshape(-1, 3)
        return self.allocate_indices(corners, rng, frame_index)

    def allocate_from_depth(self, frame, intrinsics, pose, tr: float, rng=None) -> int:
        """Allocate cells along +-tr around every back-projected valid depth pixel.

        Returns the number of newly allocated grid vertices (0 when the frame
        has no valid depth).
        """
        points_cam = backproject(frame.depth, intrinsics)
        if len(points_cam) == 0:
            return 0
        dist = np.linalg.norm(points_cam, axis=1, keepdims=True)
        dirs = points_cam / dist
        n_steps = max(2, int(np.ceil(2 * tr / (0.25 * self.voxel_size))) + 1)
        offsets = np.linspace(-tr, tr, n_steps)
        seg = points_cam[:, None, :] + offsets[None, :, None] * dirs[:, None, :]
        world = pose.apply(seg.reshape(-1, 3))
        return self.allocate_points(world, rng, frame.index)

    def cells_and_fractions(self, positions: np.ndarray):
        scaled = np.asarray(positions) / self.voxel_size
        cells = np.floor(scaled).astype(np.int64)
        return cells, scaled - cells

    def corner_rows(self, positions: np.ndarray):
        """(M, 8) table rows of the enclosing corners and a coverage mask (M,)."""
        cells, _ = self.cells_and_fractions(positions)
        rows = self.lookup(cells[:, None, :] + _CORNERS[None])
        return rows, np.all(rows >= 0, axis=1)

    def trilerp(self, tape: ad.Tape, positions: ad.Var, table: ad.Var | None = None, rows: np.ndarray | None = None):
        """Interpolate embeddings at covered positions (M, 3).

        Every position must be covered; use :meth:`corner_rows` to filter
        first.  Differentiable with respect to both the table and positions.
        """
        positions = tape.lift(positions)
        if table is None:
            table = tape.param(self.embeddings)
        pos = positions.value
        cells, frac = self.cells_and_fractions(pos)
        if rows is None:
            rows, covered = self.corner_rows(pos)
            if not np.all(covered):
                raise ValueError("trilerp called on uncovered positions")
        w_axis = np.stack([1.0 - frac, frac], axis=1)  # (M, 2, 3)
        c = _CORNERS
        weights = w_axis[:, c[:, 0], 0] * w_axis[:, c[:, 1], 1] * w_axis[:, c[:, 2], 2]  # (M, 8)
        corner_emb = table.value[rows]  # (M, 8, N)
        out = np.einsum("mc,mcn->mn", weights, corner_emb)
        inv_vs = 1.0 / self.voxel_size
        sign = np.where(c == 1, 1.0, -1.0)  # d w_axis / d frac

        def vjp(g):
            g_table = None
            if table.requires_grad:
                g_table = np.zeros_like(table.value)
                np.add.at(g_table, rows.reshape(-1), (weights[:, :, None] * g[:, None, :]).reshape(-1, g.shape[1]))
            g_pos = None
            if positions.requires_grad:
                proj = np.einsum("mcn,mn->mc", corner_emb, g)  # (M, 8)
                g_pos = np.empty_like(pos)
                for axis in range(3):
                    o1, o2 = [a for a in range(3) if a != axis]
                    dw = sign[:, axis] * w_axis[:, c[:, o1], o1] * w_axis[:, c[:, o2], o2]
                    g_pos[:, axis] = np.sum(dw * proj, axis=1) * inv_vs
            return g_table, g_pos

        return tape.record(out, (table, positions), vjp)

    def interpolate(self, positions: np.ndarray):
        """Non-differentiable helper returning (embeddings for covered points, coverage mask)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        rows, covered = self.corner_rows(positions)
        out = np.zeros((len(positions), self.embedding_dim))
        if np.any(covered):
            tape = ad.Tape()
            out[covered] = self.trilerp(tape, tape.const(positions[covered]), tape.const(self.embeddings.value), rows[covered]).value
            tape.clear()
        return out, covered

    # snapshots ---------------------------------------------------------

    def save(self, path) -> None:
        order = np.lexsort(self.indices.T[::-1]) if len(self.indices) else np.zeros(0, dtype=np.int64)
        rec = np.zeros(len(order), dtype=[("idx", "<i4", 3), ("emb", "<f8", self.embedding_dim)])
        rec["idx"] = self.indices[order]
        rec["emb"] = self.embeddings.value[order]
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IdIQ", _VERSION, self.voxel_size, self.embedding_dim, len(rec)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "VoxelMap":
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise ValueError(f"{path}: not a voxel map snapshot")
        off = len(_MAGIC)
        version, vs, dim, count = struct.unpack_from("<IdIQ", data, off)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        off += struct.calcsize("<IdIQ")
        rec = np.frombuffer(data, dtype=[("idx", "<i4", 3), ("emb", "<f8", dim)], count=count, offset=off)
        vm = cls(vs, dim)
        vm.indices = rec["idx"].astype(np.int64).reshape(-1, 3)
        vm.embeddings = ad.Param(rec["emb"].reshape(-1, dim).copy(), name="embeddings")
        vm._reindex()
        return vm
