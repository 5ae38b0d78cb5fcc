"""Structural simulator of sequential trial portfolios.

Each drug has a latent standardized effect.  The phase II statistic is a
noncentral normal draw; the sponsor then weighs an outside option against
the discounted expected payoff of a phase III trial (approval value
accrues only above the significance threshold), with iid extreme-value
shocks on both branches, so the continuation probability has a logistic
closed form.  Both decision implementations (shock draws and the closed
form) are available and must agree statistically.  Misreporting
mechanisms (suppression of nonsignificant results, inflation into a
window above the threshold) are applied last and logged, giving every
pipeline stage a known ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import pz
from .registry import (
    OutcomeRank,
    Phase,
    Registry,
    ReportedP,
    SponsorClass,
    StudyType,
    TrialRecord,
    assign_condition_category,
)

__all__ = [
    "Misreporting",
    "SimConfig",
    "SimTruth",
    "TrialTruth",
    "generate",
    "end_to_end_truth_check",
    "write_truth_csv",
]

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(32)

_CONDITION_CODES = (
    "C14", "F03", "C18", "C19", "C10", "C08", "C06", "C05",
    "C04", "C12", "C20", "C23", "C17", "C25", "C16",
)


@dataclass(frozen=True)
class Misreporting:
    """Post-generation distortion of phase III results."""

    kind: str = "none"  # "none" | "suppress" | "inflate"
    q: float = 0.0      # fraction of nonsignificant results affected
    window: float = 0.0  # inflate: relocation window width above the cutoff

    def __post_init__(self) -> None:
        if self.kind not in ("none", "suppress", "inflate"):
            raise ValueError(f"unknown misreporting kind {self.kind!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("misreporting fraction must lie in [0,1]")
        if self.window < 0:
            raise ValueError("inflation window must be nonnegative")

    @classmethod
    def none(cls) -> "Misreporting":
        return cls("none")

    @classmethod
    def suppress_share(cls, q: float) -> "Misreporting":
        return cls("suppress", q=q)

    @classmethod
    def inflate_spike(cls, q: float, window: float) -> "Misreporting":
        return cls("inflate", q=q, window=window)


@dataclass(frozen=True)
class SimConfig:
    n_trials: int = 2000
    effect_mean: float = 0.12
    effect_sd: float = 0.25
    enroll_low: int = 40
    enroll_high: int = 400
    cost: float = 1.0
    discount: float = 0.9
    outside_intercept: float = 0.2
    outside_slope: float = 0.0
    payoff_slope: float = 0.9
    shock_scale: float = 1.0
    significance_z: float = pz.Z_SIG
    # phase III statistic: sqrt(1-w^2)*carryover + w*fresh noise around the
    # shared effect; 0 keeps the phase II statistic exactly
    phase3_fresh_noise: float = 0.0
    phase3_enroll_mult: float = 1.0
    secondary_outcomes_per_trial: int = 0
    n_sponsors: int = 25
    misreporting: Misreporting = field(default_factory=Misreporting.none)
    decision_rule: str = "logistic"  # or "shocks"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trials <= 0:
            raise ValueError("n_trials must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0,1]")
        if self.shock_scale <= 0:
            raise ValueError("shock scale must be positive")
        if not 0 < self.enroll_low <= self.enroll_high:
            raise ValueError("bad enrollment range")
        if not 0.0 <= self.phase3_fresh_noise <= 1.0:
            raise ValueError("phase3_fresh_noise must lie in [0,1]")
        if self.decision_rule not in ("logistic", "shocks"):
            raise ValueError(f"unknown decision rule {self.decision_rule!r}")


@dataclass
class TrialTruth:
    trial_id: str
    theta: float
    t2: float
    z2: float
    p_continue: float
    continued: bool
    phase3_id: str = ""
    z3_true: float = float("nan")
    z3_reported: float = float("nan")
    suppressed: bool = False
    inflated: bool = False


@dataclass
class SimTruth:
    trials: list[TrialTruth]
    config: SimConfig
    synonym_pairs: list[tuple[str, str]] = field(default_factory=list)

    def continued_ids(self) -> set[str]:
        return {t.trial_id for t in self.trials if t.continued}

    def phase3_share_full(self, cutoff: float = pz.Z_SIG) -> float:
        """Share significant among all generated phase III results,
        before any misreporting (enumeration oracle)."""
        zs = [t.z3_true for t in self.trials if t.continued]
        if not zs:
            return float("nan")
        return float(np.mean([z >= cutoff for z in zs]))

    def phase3_share_reported(self, cutoff: float = pz.Z_SIG) -> float:
        zs = [
            t.z3_reported
            for t in self.trials
            if t.continued and not t.suppressed
        ]
        if not zs:
            return float("nan")
        return float(np.mean([z >= cutoff for z in zs]))

    def suppression_effect(self, cutoff: float = pz.Z_SIG) -> float:
        return self.phase3_share_reported(cutoff) - self.phase3_share_full(cutoff)


def _norm_cdf(x: np.ndarray) -> np.ndarray:
    return pz.norm_cdf(x)


def _norm_pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.asarray(x) ** 2) / math.sqrt(2.0 * math.pi)


def _tail_payoff(mu: np.ndarray, c: float) -> np.ndarray:
    """E[|T| 1{|T|>c}] for T ~ N(mu, 1)."""
    mu = np.asarray(mu, dtype=float)
    return (
        mu * ((1.0 - _norm_cdf(c - mu)) - _norm_cdf(-c - mu))
        + _norm_pdf(c - mu)
        + _norm_pdf(c + mu)
    )


def expected_phase3_value(
    t2: np.ndarray, s2: np.ndarray, cfg: SimConfig
) -> np.ndarray:
    """Discount-free expected phase III payoff given the end-of-phase-II
    information: Gauss-Hermite integration over the effect posterior of
    the above-threshold payoff of the phase III statistic."""
    prior_var = cfg.effect_sd**2
    if prior_var <= 0:
        post_mean = np.full_like(t2, cfg.effect_mean)
        post_var = np.zeros_like(t2)
    else:
        precision = 1.0 / prior_var + s2**2
        post_mean = (cfg.effect_mean / prior_var + s2 * t2) / precision
        post_var = 1.0 / precision
    s3 = s2 * math.sqrt(cfg.phase3_enroll_mult)
    # theta nodes: shape (n, nodes)
    theta = post_mean[:, None] + np.sqrt(2.0 * post_var)[:, None] * _GH_NODES[None, :]
    mu3 = s3[:, None] * theta
    vals = _tail_payoff(mu3, cfg.significance_z)
    ev = vals @ _GH_WEIGHTS / math.sqrt(math.pi)
    return cfg.payoff_slope * ev


def continuation_probability(
    t2: np.ndarray, s2: np.ndarray, cfg: SimConfig
) -> np.ndarray:
    """Closed-form logistic probability of undertaking phase III."""
    z2 = np.abs(t2)
    ev3 = expected_phase3_value(t2, s2, cfg)
    stay = cfg.outside_intercept + cfg.outside_slope * z2
    index = (-cfg.cost + cfg.discount * ev3 - stay) / cfg.shock_scale
    out = np.empty_like(index)
    pos = index >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-index[pos]))
    ex = np.exp(index[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _report_p(z: float) -> ReportedP:
    p = float(2.0 * (1.0 - pz.norm_cdf(z)))
    if p < 0.0001:
        return ReportedP.less(0.0001)
    if p < 0.001:
        return ReportedP.less(0.001)
    return ReportedP.exact(min(max(p, 0.0), 1.0))


def generate(cfg: SimConfig) -> tuple[Registry, SimTruth]:
    """Draw a synthetic registry with known ground truth.

    Emits phase II trials (with curated interventions), phase III trials
    for continued drugs (same drug and conditions, later start, sometimes
    listed under a synonym), seeded sponsor rankings, and a truth log
    recording every latent quantity and misreporting event.
    """
    ss = np.random.SeedSequence(cfg.seed)
    (s_effect, s_enroll, s_covar, s_decide, s_phase3,
     s_misreport, s_second) = [np.random.default_rng(c) for c in ss.spawn(7)]

    n = cfg.n_trials
    theta = s_effect.normal(cfg.effect_mean, cfg.effect_sd, size=n)
    enroll2 = s_enroll.integers(cfg.enroll_low, cfg.enroll_high + 1, size=n)
    s2 = np.sqrt(enroll2 / 4.0)
    eps2 = s_effect.normal(size=n)
    t2 = s2 * theta + eps2
    z2 = np.abs(t2)

    p_cont = continuation_probability(t2, s2, cfg)
    if cfg.decision_rule == "logistic":
        continued = s_decide.random(n) < p_cont
    else:
        ev3 = expected_phase3_value(t2, s2, cfg)
        stay_value = cfg.outside_intercept + cfg.outside_slope * z2
        go_value = -cfg.cost + cfg.discount * ev3
        shock_stay = s_decide.gumbel(0.0, cfg.shock_scale, size=n)
        shock_go = s_decide.gumbel(0.0, cfg.shock_scale, size=n)
        continued = go_value + shock_go > stay_value + shock_stay

    # phase III statistic: carryover of the phase II draw, optionally mixed
    # with fresh noise around the shared effect
    w = cfg.phase3_fresh_noise
    s3 = s2 * math.sqrt(cfg.phase3_enroll_mult)
    eps3 = math.sqrt(1.0 - w * w) * eps2 + w * s_phase3.normal(size=n)
    t3 = s3 * theta + eps3
    z3 = np.abs(t3)

    # covariates and paperwork
    placebo = s_covar.random(n) < 0.5
    mht = s_covar.random(n) < 0.03
    cond_codes = s_covar.choice(_CONDITION_CODES, size=n)
    sponsors = np.array(
        [f"Sponsor {i + 1:02d}" for i in s_covar.integers(0, cfg.n_sponsors, size=n)]
    )
    start_year = s_covar.integers(2009, 2016, size=n)
    start_month = s_covar.integers(1, 13, size=n)
    use_synonym = s_covar.random(n) < 0.10
    gap_days = s_covar.integers(700, 1100, size=n)

    sig = cfg.significance_z
    nonsig = z3 < sig
    suppressed = np.zeros(n, dtype=bool)
    inflated = np.zeros(n, dtype=bool)
    z3_rep = z3.copy()
    mr = cfg.misreporting
    if mr.kind == "suppress":
        suppressed = continued & nonsig & (s_misreport.random(n) < mr.q)
    elif mr.kind == "inflate":
        inflated = continued & nonsig & (s_misreport.random(n) < mr.q)
        z3_rep = np.where(
            inflated, sig + mr.window * s_misreport.random(n), z3_rep
        )

    trials: dict[str, TrialRecord] = {}
    outcomes = []
    truth_rows: list[TrialTruth] = []
    synonym_pairs: list[tuple[str, str]] = []

    for i in range(n):
        tid = f"SIM2-{i + 1:05d}"
        drug = f"drug-{i + 1:05d}"
        mesh = frozenset({f"{cond_codes[i]}:Condition {cond_codes[i]}"})
        start = date(int(start_year[i]), int(start_month[i]), 1)
        completion = start + timedelta(days=730)
        trials[tid] = TrialRecord(
            trial_id=tid,
            phase=Phase.PHASE2,
            sponsor_name=str(sponsors[i]),
            sponsor_class=SponsorClass.INDUSTRY,
            industry_rank_keys={},
            interventions=(frozenset({drug}),),
            mesh_conditions=mesh,
            condition_category=assign_condition_category(mesh),
            start_date=start,
            completion_date=completion,
            enrollment=int(enroll2[i]),
            placebo_comparator=bool(placebo[i]),
            study_type=StudyType.INTERVENTIONAL_SUPERIORITY,
        )
        outcomes.append(
            (tid, OutcomeRank.PRIMARY, _report_p(float(z2[i])), bool(mht[i]))
        )
        for j in range(cfg.secondary_outcomes_per_trial):
            theta_s = s_second.normal(cfg.effect_mean, cfg.effect_sd)
            z_s = abs(s2[i] * theta_s + s_second.normal())
            outcomes.append((tid, OutcomeRank.SECONDARY, _report_p(float(z_s)), False))

        tt = TrialTruth(
            trial_id=tid,
            theta=float(theta[i]),
            t2=float(t2[i]),
            z2=float(z2[i]),
            p_continue=float(p_cont[i]),
            continued=bool(continued[i]),
        )
        if continued[i]:
            p3id = f"SIM3-{i + 1:05d}"
            listed_drug = drug
            if use_synonym[i]:
                listed_drug = f"{drug}-alt"
                synonym_pairs.append((drug, listed_drug))
            p3_start = start + timedelta(days=int(gap_days[i]))
            trials[p3id] = TrialRecord(
                trial_id=p3id,
                phase=Phase.PHASE3,
                sponsor_name=str(sponsors[i]),
                sponsor_class=SponsorClass.INDUSTRY,
                industry_rank_keys={},
                interventions=(frozenset({listed_drug}),),
                mesh_conditions=mesh,
                condition_category=assign_condition_category(mesh),
                start_date=p3_start,
                completion_date=p3_start + timedelta(days=900),
                enrollment=int(enroll2[i] * max(cfg.phase3_enroll_mult, 1.0)),
                placebo_comparator=bool(placebo[i]),
                study_type=StudyType.INTERVENTIONAL_SUPERIORITY,
            )
            tt.phase3_id = p3id
            tt.z3_true = float(z3[i])
            tt.suppressed = bool(suppressed[i])
            tt.inflated = bool(inflated[i])
            tt.z3_reported = float(z3_rep[i])
            if not suppressed[i]:
                outcomes.append(
                    (p3id, OutcomeRank.PRIMARY, _report_p(float(z3_rep[i])), False)
                )
        truth_rows.append(tt)

    # seeded sponsor rankings for split-based analyses
    rankings: dict[str, dict[str, int]] = {}
    rank_rng = np.random.default_rng(ss.spawn(1)[0])
    names = [f"sponsor {i + 1:02d}" for i in range(cfg.n_sponsors)]
    from .registry import RANK_CRITERIA

    for crit in RANK_CRITERIA:
        order = rank_rng.permutation(cfg.n_sponsors)
        rankings[crit] = {names[j]: int(r + 1) for r, j in enumerate(order)}

    from .registry import OutcomeResult

    reg = Registry(
        trials=trials,
        outcomes=tuple(
            OutcomeResult(trial_id=t, outcome_rank=r, raw_p=p, mht_adjusted=m)
            for t, r, p, m in outcomes
        ),
        rankings=rankings,
    )
    truth = SimTruth(trials=truth_rows, config=cfg, synonym_pairs=synonym_pairs)
    return reg, truth


def write_truth_csv(truth: SimTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["trial_id", "theta", "t2", "z2", "p_continue", "continued",
             "phase3_id", "z3_true", "z3_reported", "suppressed", "inflated"]
        )
        for t in truth.trials:
            w.writerow(
                [t.trial_id, repr(t.theta), repr(t.t2), repr(t.z2),
                 repr(t.p_continue), "true" if t.continued else "false",
                 t.phase3_id,
                 repr(t.z3_true) if t.continued else "",
                 repr(t.z3_reported) if t.continued else "",
                 "true" if t.suppressed else "false",
                 "true" if t.inflated else "false"]
            )


def end_to_end_truth_check(
    cfg: SimConfig,
    bootstrap_reps: int = 200,
    run_discontinuity: bool = True,
) -> dict:
    """Run the full pipeline on a simulated registry and compare against
    the enumeration oracle.

    Returns a report with the decomposition, the residual, the oracle
    suppression effect, and the discontinuity test on reported phase III
    statistics.
    """
    from .decompose import decompose
    from .discontinuity import binned_test, cjm_test
    from .linker import build_synonym_map, link_all
    from .selection import build_design, fit_logit

    reg, truth = generate(cfg)
    synonyms = build_synonym_map(truth.synonym_pairs)
    links, summary = link_all(reg, synonyms=synonyms)

    recovered = {r.phase2_id for r in links if r.continued}
    expected = truth.continued_ids()
    if recovered != expected:
        missing = sorted(expected - recovered)[:5]
        extra = sorted(recovered - expected)[:5]
        raise AssertionError(
            f"linker failed to reproduce the known continuation set "
            f"(missing {missing}, extra {extra})"
        )

    design = build_design(reg, links)
    model = fit_logit(design)
    report = decompose(
        reg, links, model=model, bootstrap_reps=bootstrap_reps, seed=cfg.seed + 1
    )

    out = {
        "config": cfg,
        "truth": truth,
        "link_summary": summary,
        "model": model,
        "decomposition": report,
        "residual": report.diffs["ph3_minus_ph2_sc"],
        "residual_se": report.std_errs["ph3_minus_ph2_sc"],
        "oracle_suppression_effect": (
            truth.suppression_effect(cfg.significance_z)
            if cfg.misreporting.kind == "suppress"
            else 0.0
        ),
    }
    if run_discontinuity:
        z3_rep = np.array(
            [t.z3_reported for t in truth.trials if t.continued and not t.suppressed]
        )
        try:
            out["cjm_phase3"] = cjm_test(z3_rep, cutoff=cfg.significance_z)
        except ValueError as exc:
            out["cjm_phase3"] = str(exc)
        try:
            out["binned_phase3"] = binned_test(z3_rep, cutoff=cfg.significance_z, bin_width=0.08)
        except ValueError as exc:
            out["binned_phase3"] = str(exc)
    return out
