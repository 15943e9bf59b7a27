"""Registration-quality metrics, synthetic misalignment and ROC statistics.

AUROC comparisons use the fast (midrank) DeLong estimator and a gated
two-stage testing hierarchy with Holm-Bonferroni correction:

    stage 1   1A: deformable > original     1B: rigid > original
    stage 2   2A: deformable > rigid        2B: rigid > deformable

2A is only tested when 1A is rejected, 2B only when 1B is rejected.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .volio import REQUIRED_VARIANTS, ScoreTable
from .volume import BinaryMask, Volume3D

SEVERITIES = ("severe", "extreme")
FAMILIES = ("1A", "1B", "2A", "2B")
# family -> (better variant, baseline variant)
FAMILY_CONTRASTS = {"1A": ("deformable", "original"), "1B": ("rigid", "original"),
                    "2A": ("deformable", "rigid"), "2B": ("rigid", "deformable")}


class EmptyMasksWarning(UserWarning):
    """Dice of two empty masks was requested; 1.0 is returned."""


class DegenerateDelongWarning(UserWarning):
    """DeLong variance of the AUROC difference is not positive; p = 0.5 is returned."""


def dice(a: BinaryMask, b: BinaryMask) -> float:
    if a.geometry != b.geometry:
        raise ValueError("dice needs masks on the same geometry")
    na, nb = int(a.data.sum()), int(b.data.sum())
    if na + nb == 0:
        warnings.warn("both masks empty; dice defined as 1.0", EmptyMasksWarning, stacklevel=2)
        return 1.0
    return 2.0 * int(np.logical_and(a.data, b.data).sum()) / (na + nb)


# --------------------------------------------------------------------------
# synthetic misalignment

@dataclass(frozen=True)
class MisalignmentSpec:
    severity: str
    seed: int
    applied_shift: tuple[int, int, int]  # voxels along index axes (x, y, z)

    def to_dict(self) -> dict:
        return {"severity": self.severity, "seed": self.seed,
                "applied_shift": list(self.applied_shift), "rng": "philox"}


def draw_shift(severity: str, seed: int) -> tuple[int, int, int]:
    """Integer voxel shift; Philox counter-based generator keyed by ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    if severity == "severe":
        x, y = rng.integers(-5, 6, size=2)
        z = rng.integers(-2, 3)
    elif severity == "extreme":
        x, y = rng.choice([-10, 10], size=2)
        z = rng.choice([-5, 5])
    else:
        raise ValueError(f"unknown severity {severity!r}; expected one of {SEVERITIES}")
    return int(x), int(y), int(z)


def shift_volume(vol: Volume3D, shift) -> Volume3D:
    """``out[i] = in[i - shift]`` with zero fill; geometry unchanged."""
    src = vol.data
    out = np.zeros_like(src)
    dst_sl, src_sl = [], []
    for s, n in zip(shift, src.shape):
        s = int(s)
        if abs(s) >= n:
            return Volume3D(vol.geometry, out)
        dst_sl.append(slice(max(s, 0), n + min(s, 0)))
        src_sl.append(slice(max(-s, 0), n - max(s, 0)))
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    return Volume3D(vol.geometry, out)


def apply_synthetic_misalignment(vols: list[Volume3D], severity: str, seed: int):
    """Shift every volume by one shared random integer translation."""
    if not vols:
        raise ValueError("need at least one volume")
    shift = draw_shift(severity, seed)
    return [shift_volume(v, shift) for v in vols], MisalignmentSpec(severity, int(seed), shift)


# --------------------------------------------------------------------------
# scores

def _check_unit(values, what):
    arr = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{what} must lie in [0, 1]")
    return arr


def case_level_score(lesion_preds, algorithm_scores=None) -> float:
    """Maximum lesion-level prediction (0.0 without lesions), or the unweighted
    mean of per-algorithm case scores when ``algorithm_scores`` is given."""
    if algorithm_scores is not None:
        if lesion_preds is not None and len(lesion_preds):
            raise ValueError("pass lesion predictions or algorithm scores, not both")
        scores = _check_unit(algorithm_scores, "algorithm scores")
        if scores.size == 0:
            raise ValueError("need at least one algorithm score")
        return math.fsum(scores) / scores.size
    preds = _check_unit(lesion_preds if lesion_preds is not None else [], "lesion predictions")
    return float(preds.max()) if preds.size else 0.0


def ensemble_case_score(per_algorithm_lesion_preds) -> float:
    """Equal-weight ensemble of per-algorithm maxima."""
    return case_level_score(None, [case_level_score(p) for p in per_algorithm_lesion_preds])


def _split(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs at least one positive and one negative case")
    return pos, neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties count one half."""
    pos, neg = _split(scores, labels)
    m, n = pos.size, neg.size
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


# --------------------------------------------------------------------------
# DeLong

def std_normal_sf(z: float) -> float:
    """Upper tail ``1 - Phi(z)`` via the complementary error function."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def delong_components(pos: np.ndarray, neg: np.ndarray):
    """Structural components from midranks.

    ``pos`` is (k, m) and ``neg`` is (k, n) for k classifiers.  Returns
    ``(aucs (k,), v10 (k, m), v01 (k, n))`` where ``v10[i]`` is the mean kernel
    of positive ``i`` against all negatives and ``v01[j]`` that of negative
    ``j`` against all positives.
    """
    k, m = pos.shape
    n = neg.shape[1]
    v10 = np.empty((k, m))
    v01 = np.empty((k, n))
    for r in range(k):
        tz = rankdata(np.concatenate([pos[r], neg[r]]))
        tx = rankdata(pos[r])
        ty = rankdata(neg[r])
        v10[r] = (tz[:m] - tx) / n
        v01[r] = 1.0 - (tz[m:] - ty) / m
    aucs = v10.mean(axis=1)
    return aucs, v10, v01


@dataclass(frozen=True)
class DelongResult:
    auroc_1: float
    auroc_2: float
    var_1: float
    var_2: float
    covar: float
    z: float
    p_one_tailed: float
    direction: str = "1>2"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def delong_test(scores_1, scores_2, labels, direction: str = "1>2") -> DelongResult:
    """One-tailed paired DeLong test of ``auroc_1 > auroc_2`` (or the reverse).

    ``V = S10/m + S01/n`` with S the sample covariance (ddof=1) of the
    structural components; ``z = (a1 - a2) / sqrt(V1 + V2 - 2C)``, negated
    for ``direction="2>1"``; ``p = 1 - Phi(z)``.  A non-positive variance of
    the difference gives ``z = 0``, ``p = 0.5`` and ``degenerate=True``.
    """
    if direction not in ("1>2", "2>1"):
        raise ValueError("direction must be '1>2' or '2>1'")
    s1 = np.asarray(scores_1, dtype=float)
    s2 = np.asarray(scores_2, dtype=float)
    if s1.shape != s2.shape:
        raise ValueError("paired score vectors must have the same length")
    pos1, neg1 = _split(s1, labels)
    pos2, neg2 = _split(s2, labels)
    m, n = pos1.size, neg1.size
    aucs, v10, v01 = delong_components(np.vstack([pos1, pos2]), np.vstack([neg1, neg2]))
    s10 = np.cov(v10) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(v01) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var_diff = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    degenerate = not var_diff > 0 or np.array_equal(s1, s2)
    if degenerate:
        z, p = 0.0, 0.5
        warnings.warn("DeLong variance of the difference is not positive; p set to 0.5",
                      DegenerateDelongWarning, stacklevel=2)
    else:
        z = float((aucs[0] - aucs[1]) / math.sqrt(var_diff))
        if direction == "2>1":
            z = -z
        p = std_normal_sf(z)
    return DelongResult(float(aucs[0]), float(aucs[1]), float(cov[0, 0]), float(cov[1, 1]),
                        float(cov[0, 1]), z, p, direction, degenerate)


# --------------------------------------------------------------------------
# multiple testing

def holm_thresholds(pvalues, alpha: float) -> list[float]:
    """Per-hypothesis Holm threshold ``alpha / (m - rank + 1)`` (rank from 1,
    ascending p, ties broken by input order)."""
    p = np.asarray(pvalues, dtype=float)
    order = np.argsort(p, kind="stable")
    out = np.empty(len(p))
    out[order] = alpha / (len(p) - np.arange(len(p)))
    return out.tolist()


def holm_bonferroni(pvalues, alpha: float = 0.05) -> list[bool]:
    """Step-down Holm procedure; flags are returned in input order."""
    p = np.asarray(pvalues, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    m = len(p)
    rejected = [False] * m
    for rank, i in enumerate(np.argsort(p, kind="stable")):
        if p[i] <= alpha / (m - rank):
            rejected[i] = True
        else:
            break
    return rejected


@dataclass(frozen=True)
class FamilyResult:
    tested: bool
    p_value: float | None = None
    alpha_used: float | None = None
    rejected: bool = False
    delong: DelongResult | None = None

    def to_dict(self) -> dict:
        if not self.tested:
            return {"tested": False, "p_value": "not tested", "alpha_used": None,
                    "rejected": False}
        return {"tested": True, "p_value": self.p_value, "alpha_used": self.alpha_used,
                "rejected": self.rejected, "z": self.delong.z,
                "degenerate": self.delong.degenerate}


@dataclass(frozen=True)
class HierarchyOutcome:
    alpha: float
    aurocs: dict
    families: dict = field(default_factory=dict)  # name -> FamilyResult

    def tested(self, name: str) -> bool:
        return self.families[name].tested

    def rejected(self, name: str) -> bool:
        return self.families[name].rejected

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "aurocs": dict(self.aurocs),
                "families": {k: self.families[k].to_dict() for k in FAMILIES}}


def _run_stage(table: ScoreTable, names, alpha, results):
    tests = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDelongWarning)
        for name in names:
            better, base = FAMILY_CONTRASTS[name]
            tests[name] = delong_test(table.scores[better], table.scores[base], table.labels)
    pvals = [tests[nm].p_one_tailed for nm in names]
    flags = holm_bonferroni(pvals, alpha)
    thresholds = holm_thresholds(pvals, alpha)
    for nm, p, flag, thr in zip(names, pvals, flags, thresholds):
        results[nm] = FamilyResult(True, p, thr, flag, tests[nm])


def run_hierarchical_plan(table: ScoreTable, alpha: float = 0.05) -> HierarchyOutcome:
    missing = [v for v in REQUIRED_VARIANTS if v not in table.scores]
    if missing:
        raise ValueError(f"score table lacks variant(s): {', '.join(missing)}")
    aurocs = {v: auroc(table.scores[v], table.labels) for v in REQUIRED_VARIANTS}
    results: dict[str, FamilyResult] = {}
    _run_stage(table, ["1A", "1B"], alpha, results)
    stage2 = [s for s, gate in (("2A", "1A"), ("2B", "1B")) if results[gate].rejected]
    if stage2:
        _run_stage(table, stage2, alpha, results)
    for name in FAMILIES:
        results.setdefault(name, FamilyResult(False))
    return HierarchyOutcome(alpha, aurocs, results)


def format_report(outcome: HierarchyOutcome) -> str:
    lines = ["AUROC per variant"]
    for v, a in outcome.aurocs.items():
        lines.append(f"  {v:<11s} {a:.3f}")
    lines.append(f"One-tailed DeLong tests (Holm-Bonferroni, base alpha {outcome.alpha:g})")
    for name in FAMILIES:
        fam = outcome.families[name]
        better, base = FAMILY_CONTRASTS[name]
        label = f"  {name} {better} > {base}"
        if not fam.tested:
            lines.append(f"{label:<32s} not tested")
        else:
            verdict = "rejected" if fam.rejected else "not rejected"
            lines.append(f"{label:<32s} p={fam.p_value:.4g} (threshold {fam.alpha_used:.4g}) "
                         f"{verdict}")
    return "\n".join(lines) + "\n"
