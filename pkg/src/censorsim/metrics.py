"""Performance, stakeholder-cost and calibration metrics computed from traces.

Every function here is a pure function of a :class:`ReplicateResult` (or
plain arrays), so metrics recomputed from persisted traces match the
in-run values exactly.
"""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from .learner import auc, predict_proba_matrix

__all__ = [
    "observed_auc",
    "true_auc",
    "raw_gain_loss",
    "gain_loss",
    "approval_rates",
    "expected_reapplications",
    "never_approved",
    "net_improvement",
    "net_improvement_phat",
    "invalid_recourse_pct",
    "miscalibration_area",
    "sharpness",
    "rms_calibration_error",
    "adversarial_group_calibration",
    "replicate_metrics",
    "summarize",
    "METRIC_NAMES",
    "AGC_FRACTIONS",
]

RELIABILITY_BINS = 20
AGC_FRACTIONS = (0.05, 0.1, 0.2, 0.5, 1.0)
AGC_TRIALS = 200

METRIC_NAMES = (
    "observed_auc", "true_auc", "gain", "loss", "gain_raw", "loss_raw",
    "approved_pct", "approved_pct_z1", "expected_reapplications", "never_approved",
    "net_improvement", "net_improvement_phat", "invalid_recourse_pct",
    "miscalibration_area_obs", "miscalibration_area_true", "sharpness_obs", "sharpness_true",
    "agc_obs_max", "agc_true_max", "agc_gap_max",
)


# ---------------------------------------------------------------------------
# performance

def observed_auc(rep) -> float:
    """Final model scored on the data it was fit on (D^T)."""
    m = rep.final_model
    D = rep.final_data
    return auc(predict_proba_matrix(m, D.X), D.labels)


def _eval_arrays(rep):
    E = rep.eval_sample
    return E.matrix(rep.feature_names), np.where(E.outcome == 1, 1, -1)


def true_auc(rep) -> float:
    """Final model scored on the frozen unbiased sample."""
    X, y = _eval_arrays(rep)
    return auc(predict_proba_matrix(rep.final_model, X), y)


# ---------------------------------------------------------------------------
# stakeholder costs

def raw_gain_loss(rep) -> tuple[int, int]:
    """Positive and negative labels collected over periods 1..T."""
    g = l = 0
    for pt in rep.traces:
        lab = pt.label[pt.collected]
        g += int((lab == 1).sum())
        l += int((lab == -1).sum())
    return g, l


def gain_loss(rep, baseline=None) -> tuple[float, float, bool]:
    """Collected positives/negatives relative to a seed-paired baseline run.

    Returns (gain, loss, normalized).  Without a baseline the raw counts come
    back with ``normalized=False``.
    """
    g, l = raw_gain_loss(rep)
    if baseline is None:
        return float(g), float(l), False
    bg, bl = baseline if isinstance(baseline, tuple) else raw_gain_loss(baseline)
    gain = g / bg if bg else math.nan
    loss = l / bl if bl else math.nan
    return gain, loss, True


def approval_rates(rep, z_value: int | None = None, outcome_value: int | None = None
                   ) -> tuple[list[float], float]:
    """Per-period % approved (any route) and their average.

    ``z_value``/``outcome_value`` restrict to a subgroup; periods with no
    applicants in the subgroup are skipped in the average.
    """
    per = []
    for pt in rep.traces:
        mask = np.ones(pt.n_eval, bool)
        if z_value is not None:
            mask &= pt.z == z_value
        if outcome_value is not None:
            mask &= pt.outcome == outcome_value
        per.append(100.0 * pt.collected[mask].mean() if mask.any() else math.nan)
    vals = [v for v in per if not math.isnan(v)]
    return per, (float(np.mean(vals)) if vals else math.nan)


def expected_reapplications(rep) -> float:
    """Mean reapplication count of approved individuals who reapplied.

    Counts individuals in D^T, i.e. labelled in periods 1..T-1.
    """
    counts = []
    T = rep.traces[-1].period
    for pt in rep.traces:
        if pt.period >= T:
            continue
        sel = pt.collected & (pt.n_prior >= 1)
        counts.extend(pt.n_prior[sel].tolist())
    return float(np.mean(counts)) if counts else math.nan


def never_approved(rep) -> int:
    return int(rep.pool_size)


def net_improvement(rep) -> float:
    """Mean change in true outcome probability (x100) over enacted actions."""
    diffs = []
    for pt in rep.traces:
        if pt.act_feasible.size:
            f = pt.act_feasible
            diffs.append((pt.tp_after[f] - pt.tp_before[f]) * 100.0)
    d = np.concatenate(diffs) if diffs else np.zeros(0)
    return float(d.mean()) if d.size else math.nan


def net_improvement_phat(rep) -> float:
    """Same as :func:`net_improvement` but on the issuing model's p-hat (x100)."""
    diffs = []
    for pt in rep.traces:
        f = pt.act_feasible
        if not f.size or not f.any():
            continue
        still = np.flatnonzero(~pt.collected)
        before = pt.phat[still][f]
        after = predict_proba_matrix(pt.model, pt.features[still][f] + pt.act_deltas[f])
        diffs.append((after - before) * 100.0)
    d = np.concatenate(diffs) if diffs else np.zeros(0)
    return float(d.mean()) if d.size else math.nan


def invalid_recourse_pct(rep) -> float:
    """Share of enacted actions whose holder the next model still denies.

    Measured on the model's own decision, before any guarantee override.
    """
    n = bad = 0
    for pt in rep.traces:
        h = pt.had_action
        n += int(h.sum())
        bad += int((h & ~pt.model_approved).sum())
    return 100.0 * bad / n if n else math.nan


# ---------------------------------------------------------------------------
# calibration

def _bin_stats(p: np.ndarray, y01: np.ndarray, bins: int):
    idx = np.minimum((p * bins).astype(int), bins - 1)
    cnt = np.bincount(idx, minlength=bins).astype(float)
    conf = np.bincount(idx, weights=p, minlength=bins)
    acc = np.bincount(idx, weights=y01, minlength=bins)
    return cnt, conf, acc


def miscalibration_area(p, labels, bins: int = RELIABILITY_BINS) -> float:
    """Area between the reliability curve and the diagonal.

    Over ``bins`` equal-width bins: sum of bin width x |empirical positive
    rate - mean predicted probability|, empty bins skipped.
    """
    p = np.asarray(p, dtype=float)
    y01 = (np.asarray(labels) == 1).astype(float)
    if p.size == 0:
        return math.nan
    cnt, conf, acc = _bin_stats(p, y01, bins)
    ok = cnt > 0
    return float(np.sum(np.abs(acc[ok] / cnt[ok] - conf[ok] / cnt[ok])) / bins)


def sharpness(p) -> float:
    """Mean predictive variance p(1-p)."""
    p = np.asarray(p, dtype=float)
    return float(np.mean(p * (1.0 - p))) if p.size else math.nan


def rms_calibration_error(p, labels, bins: int = RELIABILITY_BINS) -> float:
    p = np.asarray(p, dtype=float)
    y01 = (np.asarray(labels) == 1).astype(float)
    if p.size == 0:
        return math.nan
    cnt, conf, acc = _bin_stats(p, y01, bins)
    ok = cnt > 0
    err = (acc[ok] - conf[ok]) / cnt[ok]
    return float(math.sqrt(np.sum(cnt[ok] / p.size * err ** 2)))


def adversarial_group_calibration(p, labels, fractions: Sequence[float] = AGC_FRACTIONS,
                                  trials: int = AGC_TRIALS, rng: np.random.Generator | None = None,
                                  bins: int = RELIABILITY_BINS) -> list[dict]:
    """Worst RMS calibration error over random subgroups of each size fraction."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(labels)
    rng = rng or np.random.default_rng(0)
    n = p.size
    out = []
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ValueError("group fractions must lie in (0, 1]")
        k = int(math.ceil(frac * n))
        worst = math.nan
        if k > 0:
            reps = 1 if k == n else trials
            errs = []
            for _ in range(reps):
                sub = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
                errs.append(rms_calibration_error(p[sub], y[sub], bins))
            worst = float(np.max(errs))
        out.append({"fraction": float(frac), "size": k, "max_rms": worst, "low_power": k < 10})
    return out


# ---------------------------------------------------------------------------
# per-replicate bundle

def replicate_metrics(rep, baseline=None, calibration: bool = True, agc_trials: int = AGC_TRIALS,
                      agc_seed: int = 0) -> dict[str, float]:
    """All scalar metrics of one replicate."""
    g, l, normed = gain_loss(rep, baseline)
    g_raw, l_raw = raw_gain_loss(rep)
    out = {
        "observed_auc": observed_auc(rep),
        "true_auc": true_auc(rep),
        "gain": g if normed else math.nan,
        "loss": l if normed else math.nan,
        "gain_raw": float(g_raw),
        "loss_raw": float(l_raw),
        "approved_pct": approval_rates(rep)[1],
        "approved_pct_z1": approval_rates(rep, 1)[1],
        "expected_reapplications": expected_reapplications(rep),
        "never_approved": float(never_approved(rep)),
        "net_improvement": net_improvement(rep),
        "net_improvement_phat": net_improvement_phat(rep),
        "invalid_recourse_pct": invalid_recourse_pct(rep),
    }
    if calibration:
        m = rep.final_model
        D = rep.final_data
        p_obs = predict_proba_matrix(m, D.X)
        X, y = _eval_arrays(rep)
        p_true = predict_proba_matrix(m, X)
        out["miscalibration_area_obs"] = miscalibration_area(p_obs, D.labels)
        out["miscalibration_area_true"] = miscalibration_area(p_true, y)
        out["sharpness_obs"] = sharpness(p_obs)
        out["sharpness_true"] = sharpness(p_true)
        a_obs = adversarial_group_calibration(p_obs, D.labels, trials=agc_trials,
                                              rng=np.random.default_rng([agc_seed, rep.replicate, 1]))
        a_true = adversarial_group_calibration(p_true, y, trials=agc_trials,
                                               rng=np.random.default_rng([agc_seed, rep.replicate, 2]))
        for a, b in zip(a_obs, a_true):
            out[f"agc_obs@{a['fraction']}"] = a["max_rms"]
            out[f"agc_true@{b['fraction']}"] = b["max_rms"]
        out["agc_obs_max"] = max(a["max_rms"] for a in a_obs)
        out["agc_true_max"] = max(b["max_rms"] for b in a_true)
        out["agc_gap_max"] = out["agc_true_max"] - out["agc_obs_max"]
    return out


def summarize(rows: Iterable[Mapping[str, float]]) -> dict[str, tuple[float, float]]:
    """Across-replicate (mean, std); std is nan for a single replicate."""
    rows = list(rows)
    keys = list(rows[0]) if rows else []
    out = {}
    for k in keys:
        v = np.array([r[k] for r in rows], dtype=float)
        ok = v[~np.isnan(v)]
        mean = float(ok.mean()) if ok.size else math.nan
        std = float(ok.std(ddof=1)) if ok.size > 1 else math.nan
        out[k] = (mean, std)
    return out
