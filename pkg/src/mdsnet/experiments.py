"""Experiment harnesses: repeated k-fold cross-validation, the two-group
robustness study, hyper-parameter sweeps and the ablation benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import MetricReport, sensitivity_ratio, two_sample_ttest
from .training import evaluate, fit

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# cross-validation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CVPlan:
    folds: int = 4
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.repetitions < 1:
            raise ValueError("need at least one repetition")

    def permutation(self, n_cases, repetition):
        return np.random.default_rng([self.seed, repetition]).permutation(n_cases)

    def split(self, n_cases, repetition):
        """Test-fold index arrays for one repetition; sizes differ by at most one."""
        if n_cases < self.folds:
            raise ValueError(f"{n_cases} cases cannot fill {self.folds} folds")
        return np.array_split(self.permutation(n_cases, repetition), self.folds)


@dataclass
class CVResult:
    plan: CVPlan
    reports: dict = field(default_factory=dict)  # (repetition, fold) -> MetricReport

    def dice(self):
        return [d for key in sorted(self.reports) for d in self.reports[key].values("dice")]

    def fold_means(self):
        return {key: r.mean("dice") for key, r in sorted(self.reports.items())}

    def rows(self, group=""):
        for (rep, fold), report in sorted(self.reports.items()):
            for c in report.cases:
                yield (group, rep, fold, c.case, c.dice, c.jaccard, c.precision, c.recall,
                       "" if c.rmse is None else c.rmse)


CV_HEADER = ("group", "repetition", "fold", "case", "dice", "jaccard", "precision", "recall", "rmse")


def cross_validate(cases, plan, config, use_refiner=None, progress=None):
    """Train on k-1 folds and evaluate the held-out fold, for every fold and repetition.

    Fold models get their own seed derived from ``config.seed``, the repetition
    and the fold, so runs are reproducible and folds independent.
    """
    cases = list(cases)
    use_refiner = config.use_refiner if use_refiner is None else use_refiner
    result = CVResult(plan)
    for rep in range(plan.repetitions):
        for fold, test_idx in enumerate(plan.split(len(cases), rep)):
            test_set = set(int(i) for i in test_idx)
            train = [c for i, c in enumerate(cases) if i not in test_set]
            test = [cases[i] for i in sorted(test_set)]
            seed = int(np.random.default_rng([config.seed, plan.seed, rep, fold]).integers(2**31))
            model = fit(train, replace(config, seed=seed, use_refiner=use_refiner))
            result.reports[(rep, fold)] = evaluate(model, test, use_refiner=use_refiner)
            if progress is not None:
                progress(rep, fold, result.reports[(rep, fold)].mean("dice"))
    return result


@dataclass
class RobustnessResult:
    groups: tuple
    t: float
    p: float


def robustness_study(cases, config, repetitions=(2, 3), folds=4, seed=0, progress=None):
    """Two groups of repeated CV with independent shuffles, compared by a t-test on per-case Dice."""
    groups = tuple(
        cross_validate(cases, CVPlan(folds, reps, seed=seed * 1000 + g), config, progress=progress)
        for g, reps in enumerate(repetitions)
    )
    t, p = two_sample_ttest(groups[0].dice(), groups[1].dice())
    return RobustnessResult(groups, t, p)


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

K_AXIS = (3, 5, 7, 9)
LAMBDA_GRID = ((0.4, 0.6), (0.5, 0.5), (0.6, 0.4))
FLOAT_STEPS = (0.1, 0.2)
BENCHMARK = (0.5, 0.5)


def lambda_float_settings(base=BENCHMARK, steps=FLOAT_STEPS):
    """Joint perturbations of both coefficients by +-step: four sign patterns per step."""
    out = []
    for a in steps:
        for sv in (1, -1):
            for ss in (1, -1):
                lv = base[0] * (1 + sv * a)
                ls = base[1] * (1 + ss * a)
                out.append((f"lv{sv * a:+.0%}/ls{ss * a:+.0%}", round(lv, 12), round(ls, 12)))
    return out


def sweep_settings(axis, values=None):
    """``[(label, overrides)]`` for a sweep axis: ``k``, ``lambda`` or ``lambda-float``."""
    if axis == "k":
        return [(f"k={k}", {"k": int(k)}) for k in (values or K_AXIS)]
    if axis == "lambda":
        return [(f"lv={lv}/ls={ls}", {"lambda_v": lv, "lambda_s": ls}) for lv, ls in (values or LAMBDA_GRID)]
    if axis == "lambda-float":
        settings = [("benchmark", {"lambda_v": BENCHMARK[0], "lambda_s": BENCHMARK[1]})]
        settings += [(label, {"lambda_v": lv, "lambda_s": ls}) for label, lv, ls in lambda_float_settings()]
        return settings
    raise ValueError(f"unknown sweep axis {axis!r}; choose k, lambda or lambda-float")


@dataclass
class SweepRow:
    label: str
    overrides: dict
    report: MetricReport
    ratio: float | None = None

    @property
    def dice(self):
        return self.report.mean("dice")


SWEEP_HEADER = ("setting", "k", "lambda_v", "lambda_s", "dice", "jaccard", "precision", "recall", "rmse", "ratio")


def sweep(train_cases, test_cases, config, axis, values=None, progress=None, seeds=None):
    """Train and evaluate each setting; the lambda-float axis also reports Dice
    ratios against the (0.5, 0.5) benchmark.

    With ``seeds`` every setting is trained once per seed and the per-case
    reports are pooled, so a setting's Dice is the mean over seeds.
    """
    rows = []
    for label, overrides in sweep_settings(axis, values):
        cfg = replace(config, **overrides)
        report = MetricReport()
        for seed in (seeds if seeds is not None else (cfg.seed,)):
            model = fit(train_cases, replace(cfg, seed=seed))
            report.cases.extend(evaluate(model, test_cases, use_refiner=cfg.use_refiner).cases)
        rows.append(SweepRow(label, overrides, report))
        if progress is not None:
            progress(label, rows[-1].dice)
    if axis == "lambda-float":
        bench = rows[0].dice
        for row in rows[1:]:
            row.ratio = sensitivity_ratio(row.dice, bench)
    return rows


def sweep_table(rows, config):
    for row in rows:
        cfg = replace(config, **row.overrides)
        means = [row.report.mean(n) for n in ("dice", "jaccard", "precision", "recall", "rmse")]
        yield (row.label, cfg.k, cfg.lambda_v, cfg.lambda_s, *("" if m is None else m for m in means),
               "" if row.ratio is None else row.ratio)


# ----------------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------------

ABLATION_ORDER = ("U-Net", "Stack-U-Net", "MDS-Net*", "MDS-Net")


def ablation(train_cases, test_cases, config, mdsnet=None, progress=None):
    """Per-variant test reports for the four-way comparison.

    U-Net is the same network with single-slice stacks; Stack-U-Net drops the
    slice regulariser; MDS-Net* is the full model without the refiner.  A
    trained full model can be passed in to avoid refitting it.
    """
    reports = {}
    unet = fit(train_cases, replace(config, k=1, use_refiner=False))
    reports["U-Net"] = evaluate(unet, test_cases, use_refiner=False)
    stack = fit(train_cases, replace(config, lambda_s=0.0, use_refiner=False))
    reports["Stack-U-Net"] = evaluate(stack, test_cases, use_refiner=False)
    full = mdsnet if mdsnet is not None else fit(train_cases, replace(config, use_refiner=True))
    reports["MDS-Net*"] = evaluate(full, test_cases, use_refiner=False)
    reports["MDS-Net"] = evaluate(full, test_cases, use_refiner=True)
    if progress is not None:
        for name in ABLATION_ORDER:
            progress(name, reports[name].mean("dice"))
    return reports
