"""Built-in oracle suite run by ``smcmix verify``.

Every check compares the library against an independent computation
(central differences, brute force, Monte Carlo or a closed form) and
returns a named :class:`OracleResult`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import inter_class_score, semantic_similarity_score
from .dataset import Dataset, chi_square_pvalue, foreground_sampling_probs, sample_mix_indices
from .mixer import AugmentPolicy, MaskRect, MixRecord, make_training_view, soft_label
from .model import classify, encode, init_model, project
from .pairloss import balanced_ce, classify_pairs, loss_weights, smc_loss, total_loss
from .tensor import Tensor, finite_diff_check

GRAD_TOL = 1e-4


@dataclass
class OracleResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": float(self.value),
            "threshold": float(self.threshold),
            "detail": self.detail,
        }


# ------------------------------------------------------------------ gradients


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape):
    # Well-separated entries so max() has a unique winner under perturbation.
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random scalar-valued probe per primitive.

    Each probe contracts the primitive's output with a fixed random weight
    so every output coordinate influences the scalar.
    """

    def contract(out: Tensor, w: np.ndarray) -> Tensor:
        return T.sum(T.mask_apply(out, w))

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w34 = rng.normal(size=(3, 4))
    w32 = rng.normal(size=(3, 2))
    w4 = rng.normal(size=4)
    w3 = rng.normal(size=3)
    where = rng.random((3, 4)) < 0.7
    where[:, 0] = True
    idx = rng.integers(0, 3, 5)
    w54 = rng.normal(size=(5, 4))
    return {
        "add": (lambda x, y: contract(T.add(x, y), w34), [a, rng.normal(size=4)]),
        "multiply": (lambda x, y: contract(T.multiply(x, y), w34), [a, rng.normal(size=(3, 4))]),
        "matmul": (lambda x, y: contract(T.matmul(x, y), w32), [a, b]),
        "matmul_t": (lambda x, y: contract(T.matmul(x, y, transpose_b=True), w32), [a, b.T.copy()]),
        "exp": (lambda x: contract(T.exp(x), w34), [a]),
        "log": (lambda x: contract(T.log(x), w34), [rng.uniform(0.5, 2.0, (3, 4))]),
        "relu": (lambda x: contract(T.relu(x), w34), [_away_from_zero(rng, (3, 4))]),
        "sum": (lambda x: contract(T.sum(x, axis=0), w4), [a]),
        "mean": (lambda x: contract(T.mean(x, axis=1), w3), [a]),
        "max": (lambda x: contract(T.max(x, axis=1), w3), [_distinct(rng, (3, 4))]),
        "softmax": (lambda x: contract(T.softmax(x, axis=1), w34), [a]),
        "softmax_masked": (lambda x: contract(T.softmax(x, axis=1, where=where), w34), [a]),
        "log_softmax": (lambda x: contract(T.log_softmax(x, axis=1), w34), [a]),
        "log_softmax_masked": (lambda x: contract(T.log_softmax(x, axis=1, where=where), w34), [a]),
        "logsumexp": (lambda x: contract(T.logsumexp(x, axis=1), w3), [a]),
        "l2_normalize": (lambda x: contract(T.l2_normalize(x, axis=1), w34), [a]),
        "concat": (lambda x, y: contract(T.concat([x, y], axis=0), w54), [a, rng.normal(size=(2, 4))]),
        "index_select": (lambda x: contract(T.index_select(x, idx, axis=0), w54), [a]),
        "mask_apply": (lambda x: T.sum(T.mask_apply(x, w34)), [a]),
        "reshape": (lambda x: contract(T.reshape(x, (4, 3)), w34.reshape(4, 3)), [a]),
    }


def _primitive_of(case: str) -> str:
    return case.split("_masked")[0].removesuffix("_t")


def check_primitive_gradients(trials: int = 100, seed: int = 0) -> list[OracleResult]:
    """Central-difference check of every primitive on ``trials`` random inputs."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for case, (fn, point) in _primitive_cases(rng).items():
            err = finite_diff_check(fn, [Tensor(p) for p in point], epsilon=1e-5)
            name = _primitive_of(case)
            worst[name] = max(worst.get(name, 0.0), err)
    return [OracleResult(f"grad.{name}", err < GRAD_TOL, err, GRAD_TOL) for name, err in sorted(worst.items())]


def _random_records(rng, n: int, num_classes: int, lam_choices=None) -> list[MixRecord]:
    records = []
    for _ in range(n):
        fg, bg = (int(c) for c in rng.integers(0, num_classes, 2))
        lam = float(rng.uniform(0.2, 0.8)) if lam_choices is None else float(rng.choice(lam_choices))
        records.append(MixRecord(fg, bg, lam, lam, MaskRect(0, 0, 8, 8), soft_label(num_classes, fg, bg, lam)))
    return records


def check_composed_gradients(seed: int = 0, n: int = 8, num_classes: int = 5, max_coords: int = 200) -> list[OracleResult]:
    """Finite-difference checks of the SMC, compensated CE and total losses."""
    rng = np.random.default_rng(seed)
    records = _random_records(rng, n, num_classes)
    pairs = classify_pairs(records)
    labels = np.stack([r.soft_label for r in records])
    log_prior = np.log(rng.dirichlet(np.ones(num_classes)))
    out = []

    def smc(z):
        return smc_loss(T.l2_normalize(z, axis=1), pairs, records, tau=0.1)

    err = finite_diff_check(smc, [Tensor(rng.normal(size=(n, 6)))])
    out.append(OracleResult("grad.L_SMC", err < GRAD_TOL, err, GRAD_TOL))

    def bce(z):
        return balanced_ce(z, labels, log_prior)

    err = finite_diff_check(bce, [Tensor(rng.normal(size=(n, num_classes)) * 3)])
    out.append(OracleResult("grad.L_BCE", err < GRAD_TOL, err, GRAD_TOL))

    params = init_model([16], num_classes, (1, 8, 8), seed=seed, head_dim=8)
    images = rng.uniform(0, 1, (n, 1, 8, 8))

    def train_loss():
        feats = encode(params, images)
        l_bce = balanced_ce(classify(params, feats), labels, log_prior)
        l_smc = smc_loss(project(params, feats), pairs, records, tau=0.1)
        return total_loss(l_bce, l_smc, 0.1)

    err = model_grad_error(train_loss, params.parameters(), rng, max_coords)
    out.append(OracleResult("grad.L_train", err < GRAD_TOL, err, GRAD_TOL))
    return out


def model_grad_error(fn: Callable[[], Tensor], params: list[Tensor], rng, max_coords: int, eps: float = 1e-5) -> float:
    """Central-difference check of a closure over model parameters, perturbed in place."""
    with T.GradTape():
        root = fn()
    _, grads = T.eval_with_grad(root, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = fn().item()
            flat[c] = orig - eps
            lo = fn().item()
            flat[c] = orig
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, abs(g.reshape(-1)[c] - fd) / max(1.0, abs(fd)))
    return float(worst)


# ------------------------------------------------------------- pair taxonomy


def brute_force_pairs(classes: list[tuple[int, int]]) -> dict[str, list[set[int]]]:
    out = {"F": [], "B": [], "C": [], "N": []}
    for i, (fi, bi) in enumerate(classes):
        sets = {"F": set(), "B": set(), "C": set(), "N": set()}
        for j, (fj, bj) in enumerate(classes):
            if i == j:
                continue
            if fi == fj:
                sets["F"].add(j)
            if bi == bj:
                sets["B"].add(j)
            if {fi, bi} & {fj, bj} and fi != fj and bi != bj:
                sets["C"].add(j)
            if not {fi, bi} & {fj, bj}:
                sets["N"].add(j)
        for k in out:
            out[k].append(sets[k])
    return out


def pair_invariant_violations(pairsets) -> list[str]:
    f, b, c, n = pairsets.fg_shared, pairsets.bg_shared, pairsets.cross_shared, pairsets.negatives
    size = len(f)
    off = ~np.eye(size, dtype=bool)
    problems = []
    if any(m.diagonal().any() for m in (f, b, c, n)):
        problems.append("anchor in its own set")
    if (c & (f | b)).any():
        problems.append("cross-shared overlaps F or B")
    if (n & (f | b | c)).any():
        problems.append("negatives overlap positives")
    if ((f | b | c | n) != off).any():
        problems.append("sets do not cover the batch")
    for name, m in (("F", f), ("B", b), ("C", c)):
        if (m != m.T).any():
            problems.append(f"{name} not symmetric")
    return problems


def check_pair_fuzz(batches: int = 1000, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    first = ""
    for t in range(batches):
        n = int(rng.integers(2, 65))
        vocab = int(rng.integers(1, 11))
        classes = [(int(a), int(b)) for a, b in rng.integers(0, vocab, (n, 2))]
        records = [MixRecord(f, b, 0.5, 0.5, MaskRect(0, 0, 1, 1), np.zeros(vocab)) for f, b in classes]
        ps = classify_pairs(records)
        oracle = brute_force_pairs(classes)
        got = {k: [set(ps.sets(i)[k]) for i in range(n)] for k in "FBCN"}
        problems = pair_invariant_violations(ps)
        if got != oracle or problems:
            mismatches += 1
            first = first or f"batch {t}: {problems or 'set mismatch'}"
    return OracleResult("pairs.fuzz", mismatches == 0, float(mismatches), 0.0, detail=first)


# ------------------------------------------------------------------- sampler


def check_sampler(draws: int = 100_000, seed: int = 0, counts=(100, 10, 1), gamma: float = 1.0) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(counts)), counts)
    ds = Dataset(np.zeros((len(labels), 1, 1, 1), dtype=np.float32), labels, len(counts))
    q = foreground_sampling_probs(counts, gamma)
    fg, bg = sample_mix_indices(ds, q, draws, rng)
    p_fg = chi_square_pvalue(np.bincount(labels[fg], minlength=len(counts)), q)
    p_bg = chi_square_pvalue(np.bincount(bg, minlength=len(labels)), np.full(len(labels), 1.0 / len(labels)))
    return [
        OracleResult("sampler.foreground_chi2", p_fg > 0.01, p_fg, 0.01),
        OracleResult("sampler.background_chi2", p_bg > 0.01, p_bg, 0.01),
    ]


# ---------------------------------------------------------------- mask sweep


def check_mask_sweep(size: int = 32, step: float = 0.001, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    bound = (2 * size + 1) / (size * size)
    fg = np.ones((1, size, size))
    bg = np.zeros((1, size, size))
    policy = AugmentPolicy(placement="none")
    worst, bad_label = 0.0, 0
    for lam in np.round(np.arange(0.0, 1.0 + step / 2, step), 10):
        _, rec = make_training_view(fg, bg, 0, 1, 2, policy, 1.0, rng, lam=float(lam))
        worst = max(worst, abs(rec.lambda_effective - lam))
        if rec.soft_label[0] != rec.lambda_effective:
            bad_label += 1
    ok = worst <= bound and bad_label == 0
    return OracleResult("mask.lambda_sweep", ok, worst, bound, detail=f"{bad_label} soft-label mismatches")


def check_weight_sums(draws: int = 1000, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    lams = np.concatenate([[0.0, 0.2, 0.5, 0.8, 1.0], rng.uniform(0, 1, draws)])
    worst = 0.0
    for lam in lams:
        w = loss_weights(float(lam))
        worst = max(worst, abs(w.w_f + w.w_b + w.w_c - 1.0))
    return OracleResult("weights.sum_to_one", worst <= 1e-12, worst, 1e-12)


# ---------------------------------------------------------------- balanced CE


def plain_soft_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(labels * logp).sum(axis=1).mean())


def check_bce_invariances(seed: int = 0, trials: int = 100) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    uni, shift = 0.0, 0.0
    for _ in range(trials):
        n, c = int(rng.integers(1, 9)), int(rng.integers(2, 8))
        z = rng.normal(size=(n, c)) * 3
        y = rng.dirichlet(np.ones(c), n)
        m = np.log(rng.dirichlet(np.ones(c)))
        uni = max(uni, abs(balanced_ce(Tensor(z), y, np.full(c, -np.log(c))).item() - plain_soft_ce(z, y)))
        const = rng.normal() * 10
        shift = max(shift, abs(balanced_ce(Tensor(z), y, m).item() - balanced_ce(Tensor(z), y, m + const).item()))
    h1 = balanced_ce(Tensor([[0.0, 0.0]]), [[1.0, 0.0]], np.log([0.5, 0.5])).item()
    h2 = balanced_ce(Tensor([[0.0, 0.0]]), [[0.0, 1.0]], np.log([0.9, 0.1])).item()
    hand = max(abs(h1 - math.log(2)), abs(h2 + math.log(0.1)))
    return [
        OracleResult("bce.uniform_prior", uni < 1e-9, uni, 1e-9),
        OracleResult("bce.constant_shift", shift < 1e-9, shift, 1e-9),
        OracleResult("bce.hand_values", round(h1, 4) == 0.6931 and round(h2, 4) == 2.3026, hand, 5e-5),
    ]


# --------------------------------------------------------------- diagnostics


def check_diagnostics() -> list[OracleResult]:
    same = inter_class_score(np.ones((4, 3)), 10.0)
    two = inter_class_score(np.array([[0.0, 0.0], [10.0, 0.0]]), 10.0)
    e_is = max(np.abs(same - 1.0).max(), np.abs(two - math.exp(-0.5)).max())
    vecs = np.random.default_rng(0).normal(size=(5, 4))
    ss_same, _ = semantic_similarity_score(vecs, vecs)
    # cos = 0.5 between two unit vectors 60 degrees apart
    ss_hand, _ = semantic_similarity_score(
        np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    )
    e_ss = max(abs(ss_same), abs(ss_hand - 0.25))
    return [
        OracleResult("diagnostics.inter_class", e_is < 5e-7, float(e_is), 5e-7),
        OracleResult("diagnostics.semantic_similarity", e_ss < 5e-7, float(e_ss), 5e-7),
    ]


# --------------------------------------------------------------------- suite


def run_suite(quick: bool = False, seed: int = 0) -> list[OracleResult]:
    """Run every oracle; ``quick`` shrinks trial counts but keeps every check."""
    jobs: list[Callable[[], list[OracleResult] | OracleResult]] = [
        lambda: check_primitive_gradients(10 if quick else 100, seed),
        lambda: check_composed_gradients(seed, max_coords=40 if quick else 200),
        lambda: check_pair_fuzz(100 if quick else 1000, seed),
        lambda: check_sampler(100_000, seed),
        lambda: check_mask_sweep(32, 0.01 if quick else 0.001, seed),
        lambda: check_weight_sums(1000, seed),
        lambda: check_bce_invariances(seed),
        check_diagnostics,
    ]
    results: list[OracleResult] = []
    for job in jobs:
        start = time.perf_counter()
        try:
            out = job()
        except Exception as exc:
            out = OracleResult(f"suite.job{len(results)}", False, math.nan, math.nan, detail=repr(exc))
        out = out if isinstance(out, list) else [out]
        elapsed = (time.perf_counter() - start) / len(out)
        for r in out:
            r.seconds = elapsed
        results += out
    return results
