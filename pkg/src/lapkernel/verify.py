"""Acceptance suite: algebraic identities, oracle equivalences, MC convergence.

Each ``criterion_<n>`` returns a :class:`CriterionResult`.  ``scale`` is
``"quick"`` or ``"full"``; the full scale runs every check at its stated
size, the quick one trims only the Monte-Carlo draw counts.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import readout as readout_mod
from .assembly import AssemblyInterrupted, KernelAssembler
from .augmentation import (build_augmented_dataset, check_equivariance, flip_group,
                           translation_group)
from .dp import Family, KernelConfig, compute_pair
from .finite_width import gradient_check, mc_cnngp, mc_cntk, verify_bblur_lap
from .readout import Readout, readout_fc, readout_gap
from .regression import (DEFAULT_RIDGE, krr_fit, krr_predict,
                         normalize_kernel, one_hot, verify_theorem1)
from .tensor_core import Padding

CIFAR_ENV = "LAPKERNEL_CIFAR10_DIR"


@dataclass
class CriterionResult:
    number: int
    title: str
    status: str          # "pass" | "fail" | "skip"
    detail: str
    seconds: float = 0.0
    blocking: bool = True

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def line(self) -> str:
        tag = {"pass": "PASS", "fail": "FAIL", "skip": "NOT RUN"}[self.status]
        soft = "" if self.blocking else " [non-blocking]"
        return f"criterion {self.number:2d} {tag:7s} {self.title}{soft}: {self.detail} ({self.seconds:.1f}s)"


def _kernel(cfg: KernelConfig, kind: str) -> Callable:
    reduce = readout_fc if kind == "fc" else readout_gap
    return lambda x, y: reduce(compute_pair(x, y, cfg))


def _rng(seed):
    return np.random.default_rng(seed)


# --- 1 ---------------------------------------------------------------------

def criterion_1(scale: str = "full") -> CriterionResult:
    """GAP equals the translation-augmented FC kernel divided by PQ."""
    rng = _rng(1)
    worst = 0.0
    for (P, Q), depth, family in itertools.product([(4, 4), (5, 3)], [1, 2, 3], list(Family)):
        cfg = KernelConfig(depth=depth, padding=Padding.CIRCULAR, family=family, bias=0.5)
        G = translation_group(P, Q)
        for _ in range(10):
            x, y = rng.standard_normal((2, P, Q, 2))
            gap = readout_gap(compute_pair(x, y, cfg))
            aug = sum(readout_fc(compute_pair(g(x), y, cfg)) for g in G) / len(G)
            worst = max(worst, abs(gap - aug / (P * Q)) / abs(gap))
    ok = worst <= 1e-10
    return CriterionResult(1, "GAP/translation identity", "pass" if ok else "fail",
                           f"max rel err {worst:.2e} (tol 1e-10)")


# --- 2 ---------------------------------------------------------------------

def criterion_2(scale: str = "full") -> CriterionResult:
    """Augmented kernel on D versus plain kernel on D_G (translations, 3x3)."""
    rng = _rng(2)
    cfg = KernelConfig(depth=2, padding=Padding.CIRCULAR, family=Family.CNTK)
    G = translation_group(3, 3)
    train = rng.standard_normal((6, 3, 3, 2))
    test = rng.standard_normal((4, 3, 3, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    K = _kernel(cfg, "fc")
    diffs = []
    for ridge in (0.0, 1e-3):
        rep = verify_theorem1(K, G, train, labels, test, ridge=ridge, tol=1e-6)
        diffs.append(rep.max_score_diff)
    ok = max(diffs) <= 1e-6
    return CriterionResult(2, "augmented kernel equals augmented dataset", "pass" if ok else "fail",
                           f"max score diff lambda=0: {diffs[0]:.2e}, lambda=1e-3 paired: {diffs[1]:.2e} (tol 1e-6)")


# --- 3 ---------------------------------------------------------------------

def criterion_3(scale: str = "full") -> CriterionResult:
    """GAP kernel on D versus FC kernel on the fully translated dataset."""
    rng = _rng(3)
    P = Q = 4
    cfg = KernelConfig(depth=2, padding=Padding.CIRCULAR, family=Family.CNTK)
    train = rng.standard_normal((5, P, Q, 2))
    test = rng.standard_normal((3, P, Q, 2))
    Y = one_hot(np.array([0, 1, 0, 1, 1]), 2)
    G = translation_group(P, Q)
    gap, fc = _kernel(cfg, "gap"), _kernel(cfg, "fc")
    K_gap = np.array([[gap(a, b) for b in train] for a in train])
    k_gap = np.array([[gap(a, b) for b in train] for a in test])
    aug = build_augmented_dataset(train, np.arange(len(train)), G)
    K_fc = np.array([[fc(a, b) for b in aug.images] for a in aug.images])
    k_fc = np.array([[fc(a, b) for b in aug.images] for a in test])
    diffs = []
    for ridge in (0.0, 1e-3):
        sa = k_gap @ krr_fit(K_gap, ridge, targets=Y).alpha
        # the GAP kernel is the augmented FC kernel scaled by 1/PQ
        sb = k_fc @ krr_fit(K_fc, ridge * len(G) * P * Q, targets=Y[aug.labels]).alpha
        diffs.append(float(np.max(np.abs(sa - sb))))
    ok = max(diffs) <= 1e-6
    return CriterionResult(3, "GAP on D equals FC on translated D", "pass" if ok else "fail",
                           f"max score diff lambda=0: {diffs[0]:.2e}, lambda=1e-3 paired: {diffs[1]:.2e} (tol 1e-6)")


# --- 4 ---------------------------------------------------------------------

def criterion_4(scale: str = "full") -> CriterionResult:
    """Flip-augmented GAP kernel on D versus GAP on D plus flipped D.

    Also runs the assembler's flip path (the one ``regress`` uses) against
    the doubled dataset.
    """
    rng = _rng(4)
    P, Q = 4, 4
    cfg = KernelConfig(depth=2, padding=Padding.ZERO, family=Family.CNNGP, bias=0.5)
    train = rng.standard_normal((8, P, Q, 2))
    test = rng.standard_normal((4, P, Q, 2))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    G = flip_group(P, Q)
    K = _kernel(cfg, "gap")
    diffs = [verify_theorem1(K, G, train, labels, test, ridge=r, tol=1e-6).max_score_diff
             for r in (0.0, 1e-3)]

    # efficient path: normalised flip-averaged kernel from the assembler
    ridge = DEFAULT_RIDGE
    Y = one_hot(labels, 3)
    b = KernelAssembler(cfg, [Readout.gap()], flip=True).run(train, test)
    tr_self, te_self = b.train_self[0], b.test_self[0]
    KG = 0.5 * (normalize_kernel(b.train[0], tr_self) + normalize_kernel(b.train_flip[0], tr_self))
    kG = 0.5 * (normalize_kernel(b.cross[0], te_self, tr_self) + normalize_kernel(b.cross_flip[0], te_self, tr_self))
    sa = kG @ krr_fit(KG, ridge, targets=Y).alpha
    aug = build_augmented_dataset(train, labels, G)
    raw = np.array([[K(u, v) for v in aug.images] for u in aug.images])
    self_aug = np.concatenate([tr_self, tr_self])
    cross_raw = np.array([[K(u, v) for v in aug.images] for u in test])
    sb = normalize_kernel(cross_raw, te_self, self_aug) @ krr_fit(
        normalize_kernel(raw, self_aug), ridge * 2, targets=Y[np.concatenate([np.arange(8)] * 2)]).alpha
    diffs.append(float(np.max(np.abs(sa - sb))))
    ok = max(diffs) <= 1e-6
    return CriterionResult(4, "flip-augmented GAP equals GAP on doubled dataset", "pass" if ok else "fail",
                           "max score diff lambda=0: {:.2e}, lambda=1e-3 paired: {:.2e}, "
                           "assembler flip path: {:.2e} (tol 1e-6)".format(*diffs))


# --- 5 ---------------------------------------------------------------------

def brute_force_lap(T: np.ndarray, c: int, padding: Padding) -> float:
    """Literal quadruple-offset average of shifted traces (vectorised over offsets)."""
    P, Q = T.shape[:2]
    r = np.arange(-c, c + 1)
    di, dj, dip, djp = (a.reshape(-1, 1, 1) for a in np.meshgrid(r, r, r, r, indexing="ij"))
    i = np.arange(P).reshape(1, -1, 1)
    j = np.arange(Q).reshape(1, 1, -1)
    a, b, ap, bp = i + di, j + dj, i + dip, j + djp
    if padding is Padding.CIRCULAR:
        vals = T[a % P, b % Q, ap % P, bp % Q]
    else:
        ok = (a >= 0) & (a < P) & (b >= 0) & (b < Q) & (ap >= 0) & (ap < P) & (bp >= 0) & (bp < Q)
        vals = np.where(ok, T[np.clip(a, 0, P - 1), np.clip(b, 0, Q - 1),
                              np.clip(ap, 0, P - 1), np.clip(bp, 0, Q - 1)], 0.0)
    return float(vals.sum() / (2 * c + 1) ** 4)


def criterion_5(scale: str = "full") -> CriterionResult:
    """Closed-form LAP weights against the literal offset sum, plus both limits."""
    rng = _rng(5)
    P, Q = 4, 4
    worst = 0.0
    for _ in range(20):
        T = rng.standard_normal((P, Q, P, Q))
        for c, padding in itertools.product([0, 1, 2, P], list(Padding)):
            w = readout_mod.lap_weights(P, Q, c, padding)
            fast = readout_mod.readout_lap(T, w)
            slow = brute_force_lap(T, c, padding)
            worst = max(worst, abs(fast - slow) / max(1.0, abs(slow)))
    c0_exact = all(
        readout_mod.readout_lap(T, readout_mod.lap_weights(P, Q, 0, p)) == readout_fc(T)
        for T in rng.standard_normal((20, P, Q, P, Q)) for p in Padding)

    cfg = KernelConfig(depth=2, padding=Padding.ZERO, family=Family.CNTK)
    gap_gap = 0.0
    for _ in range(5):
        x, y = rng.standard_normal((2, P, Q, 2))
        Txy, Txx, Tyy = compute_pair(x, y, cfg), compute_pair(x, x, cfg), compute_pair(y, y, cfg)
        g = readout_gap(Txy) / np.sqrt(readout_gap(Txx) * readout_gap(Tyy))
        for c in (P - 1, P):
            w = readout_mod.lap_weights(P, Q, c, Padding.ZERO)
            lx, ly = readout_mod.readout_lap(Txx, w), readout_mod.readout_lap(Tyy, w)
            gap_gap = max(gap_gap, abs(readout_mod.readout_lap(Txy, w) / np.sqrt(lx * ly) - g))
    ok = worst <= 1e-12 and c0_exact and gap_gap <= 1e-12
    return CriterionResult(5, "LAP closed form exactness", "pass" if ok else "fail",
                           f"max err vs offset sum {worst:.2e}; c=0 equals FC exactly: {c0_exact}; "
                           f"normalised LAP(c>=P-1, zero) vs GAP {gap_gap:.2e} (tol 1e-12)")


# --- 6 ---------------------------------------------------------------------

def criterion_6(scale: str = "full") -> CriterionResult:
    """Trace of the box-blurred tensor equals the LAP readout."""
    rng = _rng(6)
    worst = 0.0
    for padding, family in itertools.product(list(Padding), list(Family)):
        cfg = KernelConfig(depth=2, padding=padding, family=family)
        for _ in range(3):
            x, y = rng.standard_normal((2, 4, 4, 2))
            T = compute_pair(x, y, cfg)
            for c in (0, 1, 2):
                worst = max(worst, verify_bblur_lap(x, y, cfg, c, tensor=T).discrepancy)
    ok = worst <= 1e-12
    return CriterionResult(6, "box blur trace equals LAP", "pass" if ok else "fail",
                           f"max rel discrepancy {worst:.2e} (tol 1e-12)")


# --- 7 ---------------------------------------------------------------------

def criterion_7(scale: str = "full") -> CriterionResult:
    """Translation equivariance holds with circular padding and breaks with zero padding."""
    G = translation_group(4, 4)
    circ = []
    for family in Family:
        cfg = KernelConfig(depth=2, padding=Padding.CIRCULAR, family=family)
        circ.append(check_equivariance(_kernel(cfg, "fc"), G, trials=3, tol=1e-10, channels=2, seed=7))
    zero_cfg = KernelConfig(depth=2, padding=Padding.ZERO, family=Family.CNNGP)
    zero = check_equivariance(_kernel(zero_cfg, "fc"), G, trials=3, tol=1e-10, channels=2, seed=7)
    ok = all(r.passed for r in circ) and not zero.passed
    return CriterionResult(7, "equivariance (circular pass, zero violation)", "pass" if ok else "fail",
                           f"circular GP {circ[0].max_violation:.2e}, NTK {circ[1].max_violation:.2e} (tol 1e-10); "
                           f"zero padding violation {zero.max_violation:.2e} (expected > tol)")


# --- 8 ---------------------------------------------------------------------

def criterion_8(scale: str = "full", threads: int = 1) -> CriterionResult:
    """Monte-Carlo finite-width estimates against the analytic kernels."""
    gp_draws, ntk_draws = (2000, 500) if scale == "full" else (300, 80)
    rng = _rng(8)
    x, y = rng.standard_normal((2, 6, 6, 2))
    parts, ok = [], True
    for family, draws, mc in ((Family.CNNGP, gp_draws, mc_cnngp), (Family.CNTK, ntk_draws, mc_cntk)):
        cfg = KernelConfig(depth=2, padding=Padding.ZERO, family=family, bias=0.5)
        T = compute_pair(x, y, cfg)
        for kind in ("fc", "gap"):
            exact = readout_fc(T) if kind == "fc" else readout_gap(T)
            est = mc(x, y, cfg, kind, width=512, samples=draws, seed=80, threads=threads)
            z = est.zscore(exact)
            ok &= z <= 4.0
            parts.append(f"{family.value}/{kind} z={z:.2f}")
    grad = 0.0
    for padding, kind in itertools.product(list(Padding), ("fc", "gap", "bblur:1")):
        cfg = KernelConfig(depth=2, padding=padding, bias=0.5)
        grad = max(grad, gradient_check(cfg, shape=(4, 4, 2), width=4, readout=kind))
    ok &= grad <= 1e-5
    return CriterionResult(8, "finite-width convergence", "pass" if ok else "fail",
                           f"{', '.join(parts)} (<= 4 SE, {gp_draws}/{ntk_draws} draws, width 512); "
                           f"gradient check max rel err {grad:.1e} (tol 1e-5)")


# --- 9 ---------------------------------------------------------------------

def criterion_9(scale: str = "full", threads: int = 1, data_dir=None, n_train: int = 1000,
                n_test: int = 1000) -> CriterionResult:
    """Desk-scale CIFAR-10 trend over the LAP radius (non-blocking)."""
    from .data_io import downsample, load_cifar10, standardize

    data_dir = data_dir or os.environ.get(CIFAR_ENV)
    if not data_dir or not Path(data_dir).exists():
        return CriterionResult(9, "desk-scale LAP trend on CIFAR-10", "skip",
                               f"CIFAR-10 binaries not available (set {CIFAR_ENV})", blocking=False)
    train, test = load_cifar10(data_dir)
    rng = _rng(0)
    train = train.subset(np.sort(rng.choice(len(train), n_train, replace=False)))
    test = test.subset(np.sort(rng.choice(len(test), n_test, replace=False)))
    train, test = standardize(downsample(train, 2), downsample(test, 2))
    cfg = KernelConfig(depth=5, padding=Padding.ZERO, family=Family.CNNGP, precision="f32")
    cs = [0, 2, 4, 8]
    readouts = [Readout.lap(c, Padding.ZERO) for c in cs]
    b = KernelAssembler(cfg, readouts, threads=threads).run(train.images, test.images)
    acc = []
    for k in range(len(cs)):
        K = normalize_kernel(b.train[k], b.train_self[k])
        model = krr_fit(K, DEFAULT_RIDGE, labels=train.labels, class_count=10)
        _, pred = krr_predict(model, b.cross[k], b.test_self[k], b.train_self[k])
        acc.append(float(np.mean(pred == test.labels)))
    ok = max(acc[1:-1]) > max(acc[0], acc[-1])
    table = ", ".join(f"c={c}: {a:.3f}" for c, a in zip(cs, acc))
    return CriterionResult(9, "desk-scale LAP trend on CIFAR-10", "pass" if ok else "fail", table, blocking=False)


# --- 10 --------------------------------------------------------------------

def criterion_10(scale: str = "full") -> CriterionResult:
    """Thread-count independence and resume after interruption."""
    rng = _rng(10)
    train = rng.standard_normal((10, 4, 4, 2))
    test = rng.standard_normal((5, 4, 4, 2))
    cfg = KernelConfig(depth=3, padding=Padding.ZERO, family=Family.CNTK)
    readouts = [Readout.fc(), Readout.gap(), Readout.lap(1)]

    def blob(b):
        return b"".join(np.ascontiguousarray(a).tobytes()
                        for a in (b.train, b.train_self, b.cross, b.test_self, b.train_flip, b.cross_flip))

    with tempfile.TemporaryDirectory() as tmp:
        runs = {}
        for threads in (1, 8):
            asm = KernelAssembler(cfg, readouts, depths=[2, 3], flip=True, tile=4, threads=threads,
                                  workdir=Path(tmp) / f"t{threads}")
            runs[threads] = blob(asm.run(train, test))
        resumed = KernelAssembler(cfg, readouts, depths=[2, 3], flip=True, tile=4, threads=2,
                                  workdir=Path(tmp) / "resume")
        interrupted = False
        try:
            resumed.run(train, test, stop_after=3)
        except AssemblyInterrupted:
            interrupted = True
        after = blob(resumed.run(train, test))
    same_threads = runs[1] == runs[8]
    same_resume = interrupted and after == runs[1]
    ok = same_threads and same_resume
    return CriterionResult(10, "determinism and resume", "pass" if ok else "fail",
                           f"1 vs 8 threads byte-identical: {same_threads}; "
                           f"interrupted run resumed byte-identical: {same_resume}")


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 11)}


@contextlib.contextmanager
def tampered_lap_weights(delta: float = 1e-3):
    """Mutation hook: perturb one LAP weight so the exactness check must fail."""
    original = readout_mod.lap_weights

    def broken(P, Q, c, padding=Padding.ZERO):
        w = original(P, Q, c, padding)
        u = w.u_row.astype(np.float64)
        u[0, 0] += delta
        return readout_mod.LapWeights(w.P, w.Q, w.c, u, w.u_col, w.scale)

    readout_mod.lap_weights = broken
    try:
        yield
    finally:
        readout_mod.lap_weights = original


def run_criterion(number: int, scale: str = "full", **kwargs) -> CriterionResult:
    """Run one criterion, timing it; a crash becomes a failure line."""
    fn = CRITERIA[number]
    t0 = time.perf_counter()
    try:
        res = fn(scale, **kwargs)
    except Exception as exc:
        res = CriterionResult(number, fn.__doc__.strip().splitlines()[0], "fail", f"error: {exc!r}")
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(scale: str = "quick", only=None, threads: int = 1, mutate: str | None = None,
              echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    if scale not in ("quick", "full"):
        raise ValueError("scale must be 'quick' or 'full'")
    numbers = sorted(only) if only else list(CRITERIA)
    ctx = tampered_lap_weights() if mutate == "lap_weights" else contextlib.nullcontext()
    if mutate not in (None, "lap_weights"):
        raise ValueError(f"unknown mutation {mutate!r}")
    results = []
    with ctx:
        for n in numbers:
            kwargs = {"threads": threads} if n in (8, 9) else {}
            res = run_criterion(n, scale, **kwargs)
            results.append(res)
            if echo:
                echo(res.line())
    return results


def suite_passed(results) -> bool:
    return all(r.passed or not r.blocking for r in results)
