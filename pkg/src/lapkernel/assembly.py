"""Tiled, resumable kernel-matrix assembly.

Work proceeds in two phases:

1. self phase -- every image's self diagonals and self readout values;
2. pair phase -- fixed ``tile x tile`` blocks of the train/train matrix
   (upper triangle only) and of the test/train cross block.

Each finished tile is written to ``<workdir>/tiles`` and recorded in
``<workdir>/journal.txt`` as ``tile <block> <row0> <col0> <sha256>``.  A rerun
skips tiles whose file still matches its checksum, so an interrupted run
resumes where it stopped.  The tile grid does not depend on the thread
count and every tile is computed the same way, so the assembled matrices are
bit-identical for any number of workers.

All values produced here are raw (unnormalised) readouts.  Several
``(depth, readout)`` combinations can be produced from one DP pass, and with
``flip=True`` the values ``K(F x_i, x_j)`` needed by the flip-augmented
kernel are produced alongside.
"""
from __future__ import annotations

import hashlib
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dp import KernelConfig, KernelEngine
from .readout import Readout, ReadoutSet

log = logging.getLogger(__name__)

DEFAULT_TILE = 64
JOURNAL = "journal.txt"
_BATCH_BYTES = 48 * 2 ** 20


class AssemblyInterrupted(RuntimeError):
    """Raised when a run stops early on purpose (``stop_after``)."""


class PairComputationError(RuntimeError):
    """A pair DP failed; ``block``, ``row`` and ``col`` name the offending pair."""

    def __init__(self, block: str, row: int, col: int, cause: Exception):
        super().__init__(f"{block} pair ({row}, {col}) failed: {cause}")
        self.block, self.row, self.col = block, row, col


@dataclass
class KernelBlocks:
    combos: list[tuple[int, Readout]]
    train: np.ndarray            # (n_combos, n, n) raw K(x_i, x_j)
    train_self: np.ndarray       # (n_combos, n)
    cross: np.ndarray | None     # (n_combos, m, n) raw K(t_a, x_j)
    test_self: np.ndarray | None  # (n_combos, m)
    train_flip: np.ndarray | None = None   # K(F x_i, x_j)
    cross_flip: np.ndarray | None = None   # K(F t_a, x_j)

    def index(self, depth: int, readout: Readout) -> int:
        return self.combos.index((depth, readout))


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _atomic_save(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_suffix(".tmp.npy")
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Journal:
    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        self.done: dict[str, str] = {}
        if path.exists():
            for line in path.read_text().splitlines():
                parts = line.split()
                if len(parts) == 5 and parts[0] == "tile":
                    self.done[" ".join(parts[1:4])] = parts[4]
                elif len(parts) == 3 and parts[0] == "self":
                    self.done["self " + parts[1]] = parts[2]

    def checksum(self, key: str) -> str | None:
        return self.done.get(key)

    def record(self, line: str, key: str, digest: str) -> None:
        with self.lock:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self.done[key] = digest


class KernelAssembler:
    def __init__(self, cfg: KernelConfig, readouts, depths=None, *, flip: bool = False,
                 tile: int = DEFAULT_TILE, threads: int = 1, workdir=None):
        self.cfg = cfg
        self.engine = KernelEngine(cfg)
        self.readouts = [r if isinstance(r, Readout) else Readout.parse(r) for r in readouts]
        self.depths = sorted(set(depths or [cfg.depth]))
        if self.depths[-1] > cfg.depth:
            raise ValueError("requested depth exceeds the configured depth")
        self.combos = [(d, r) for d in self.depths for r in self.readouts]
        self.flip = flip
        self.tile = int(tile)
        self.threads = max(1, int(threads))
        self.workdir = Path(workdir) if workdir is not None else None

    # -- helpers -----------------------------------------------------------
    def _batch(self, P: int, Q: int) -> int:
        per_pair = (P * Q) ** 2 * np.dtype(self.cfg.dtype).itemsize * 6
        return max(1, min(self.tile, _BATCH_BYTES // per_pair))

    def _values(self, x, ys, dx, dys, rset: ReadoutSet) -> np.ndarray:
        """``(n_combos, B)`` raw readouts of ``x`` against the batch ``ys``."""
        tensors = self.engine.pair_tensors(x, ys, dx, dys, self.depths)
        return np.concatenate([rset.apply(tensors[d]).reshape(len(rset), -1) for d in self.depths])

    def _row_values(self, x, dx, cols, cdiag, rset, P, Q) -> np.ndarray:
        B = self._batch(P, Q)
        parts = [self._values(x, cols[s:s + B], dx, cdiag[s:s + B], rset)
                 for s in range(0, len(cols), B)]
        return np.concatenate(parts, axis=1)

    # -- phases ------------------------------------------------------------
    def self_phase(self, images: np.ndarray, journal: _Journal | None, name: str):
        """Self diagonals and self readout values, cached in the workdir."""
        key = f"self {name}"
        path = self.workdir / f"self_{name}.npz" if self.workdir else None
        if journal is not None and path.exists():
            digest = journal.checksum(key)
            with np.load(path) as z:
                diags, vals = z["diags"], z["values"]
            if digest == _sha(vals) + _sha(diags)[:16]:
                return diags, vals
        P, Q = images.shape[1:3]
        rset = ReadoutSet(self.readouts, P, Q)
        diags = np.stack([self.engine.self_diagonals(x) for x in images])
        vals = np.stack([self._values(x, x[None], d, d[None], rset)[:, 0]
                         for x, d in zip(images, diags)], axis=1)
        if journal is not None:
            np.savez(path, diags=diags, values=vals)
            digest = _sha(vals) + _sha(diags)[:16]
            journal.record(f"self {name} {digest}", key, digest)
        return diags, vals

    def _tile_jobs(self, n_rows: int, n_cols: int, symmetric: bool, block: str):
        t = self.tile
        for r0 in range(0, n_rows, t):
            for c0 in range(0, n_cols, t):
                if symmetric and c0 + t <= r0:
                    continue
                yield block, r0, c0

    def _compute_tile(self, job, rows, rdiag, cols, cdiag, rset, P, Q):
        block, r0, c0 = job
        t = self.tile
        rsl, csl = slice(r0, min(r0 + t, len(rows))), slice(c0, min(c0 + t, len(cols)))
        cimg, cd = cols[csl], cdiag[csl]

        def row(r, flipped):
            x, d = rows[r], rdiag[r]
            if flipped:
                x, d = x[::-1], d[:, ::-1]
            try:
                return self._row_values(x, d, cimg, cd, rset, P, Q)
            except Exception as exc:
                # locate the failing column by retrying one pair at a time
                for cidx in range(len(cimg)):
                    try:
                        self._values(x, cimg[cidx:cidx + 1], d, cd[cidx:cidx + 1], rset)
                    except Exception as inner:
                        raise PairComputationError(block, r, c0 + cidx, inner) from inner
                raise PairComputationError(block, r, c0, exc) from exc

        result = np.stack([row(r, False) for r in range(rsl.start, rsl.stop)], axis=1)  # (n_combos, tr, tc)
        if self.flip:
            flipped = np.stack([row(r, True) for r in range(rsl.start, rsl.stop)], axis=1)
            result = np.concatenate([result, flipped])
        return result

    def run(self, train_images, test_images=None, stop_after: int | None = None) -> KernelBlocks:
        cfg = self.cfg
        train = np.asarray(train_images, dtype=cfg.dtype)
        test = None if test_images is None else np.asarray(test_images, dtype=cfg.dtype)
        P, Q = train.shape[1:3]
        rset = ReadoutSet(self.readouts, P, Q)
        journal = None
        if self.workdir is not None:
            (self.workdir / "tiles").mkdir(parents=True, exist_ok=True)
            journal = _Journal(self.workdir / JOURNAL)

        tr_diag, tr_self = self.self_phase(train, journal, "train")
        te_diag = te_self = None
        if test is not None and len(test):
            te_diag, te_self = self.self_phase(test, journal, "test")

        jobs = list(self._tile_jobs(len(train), len(train), True, "train"))
        if te_diag is not None:
            jobs += list(self._tile_jobs(len(test), len(train), False, "cross"))
        sources = {"train": (train, tr_diag), "cross": (test, te_diag)}

        results: dict[tuple, np.ndarray] = {}
        pending = []
        for job in jobs:
            key = " ".join(map(str, job))
            if journal is not None and journal.checksum(key) and self._tile_path(job).exists():
                arr = np.load(self._tile_path(job))
                if _sha(arr) == journal.checksum(key):
                    results[job] = arr
                    continue
                log.warning("tile %s failed its checksum; recomputing", key)
            pending.append(job)

        if stop_after is not None:
            pending = pending[:stop_after]
        total = len(jobs)

        def work(job):
            rows, rdiag = sources[job[0]]
            arr = self._compute_tile(job, rows, rdiag, train, tr_diag, rset, P, Q)
            if journal is not None:
                path = self._tile_path(job)
                _atomic_save(path, arr)
                key = " ".join(map(str, job))
                digest = _sha(arr)
                journal.record(f"tile {key} {digest}", key, digest)
            return job, arr

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for job, arr in pool.map(work, pending):
                results[job] = arr
                log.info("tile %s %d,%d done (%d/%d)", job[0], job[1], job[2], len(results), total)

        if len(results) < total:
            raise AssemblyInterrupted(f"{len(results)}/{total} tiles complete; rerun to resume")
        return self._assemble(results, train, test, tr_self, te_self)

    def _tile_path(self, job) -> Path:
        block, r0, c0 = job
        return self.workdir / "tiles" / f"{block}_{r0}_{c0}.npy"

    def _assemble(self, results, train, test, tr_self, te_self) -> KernelBlocks:
        n = len(train)
        m = 0 if test is None else len(test)
        k = len(self.combos)
        width = 2 * k if self.flip else k
        full = np.zeros((width, n, n))
        cross = np.zeros((width, m, n)) if m else None
        for (block, r0, c0), arr in results.items():
            tr, tc = arr.shape[1:]
            if block == "train":
                full[:, r0:r0 + tr, c0:c0 + tc] = arr
            else:
                cross[:, r0:r0 + tr, c0:c0 + tc] = arr
        # mirror the upper triangle; diagonal tiles are computed in full
        iu = np.triu_indices(n, 1)
        full[:, iu[1], iu[0]] = full[:, iu[0], iu[1]]
        blocks = KernelBlocks(self.combos, full[:k], tr_self, None if cross is None else cross[:k], te_self)
        if self.flip:
            blocks.train_flip = full[k:]
            blocks.cross_flip = None if cross is None else cross[k:]
        return blocks


def assemble_blocks(train_images, test_images, cfg: KernelConfig, readouts, depths=None, **kw) -> KernelBlocks:
    return KernelAssembler(cfg, readouts, depths, **kw).run(train_images, test_images)
