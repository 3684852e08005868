"""End-to-end experiments and Monte Carlo coverage checks.

Pipeline: split -> RFM tuning on the support split -> neighbor index ->
choice of the error split ``lam`` -> calibration -> label sets on the test
split -> metrics per method.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np

from dance import baselines
from dance.conformal import (
    DEFAULT_LAMBDA_GRID,
    DISJOINT,
    REUSE,
    CalibrationArtifact,
    ScoreConfig,
    conformal_quantile,
    dance_score_matrices,
    knn_sets,
    membership_from_scores,
    select_lambda,
    thresholds,
    threshold_sets,
)
from dance.data import (
    EmbeddedDataset,
    SplitSpec,
    partition,
    partition_sizes,
    split_dataset,
    synth_gaussian_mixture,
)
from dance.errors import ValidationError
from dance.metrics import ccv, coverage, mean_set_size, per_class_coverage
from dance.neighbors import build_index
from dance.rfm import RfmConfig, top1_accuracy, tune_hyperparameters

log = logging.getLogger(__name__)

METHODS = ("dance", "knn_only", "clr_only", "deep_knn", "aps", "raps", "ncp_raps")
GRID = "grid"


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 5
    dim: int = 8
    per_class: int = 200
    noise_sigma: float = 0.5
    informative_dims: Optional[int] = None
    seed: int = 0

    def generate(self):
        return synth_gaussian_mixture(self.classes, self.dim, self.per_class, self.noise_sigma,
                                      self.informative_dims, self.seed)


@dataclass(frozen=True)
class BaselineOptions:
    deep_knn_k: int = 75
    ncp_k: int = 50
    ncp_bandwidth: Optional[float] = None
    raps_lambda: float = 0.001
    raps_k: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    alpha: float = 0.1
    lam: Union[float, str] = GRID
    mode: str = REUSE
    score: ScoreConfig = field(default_factory=ScoreConfig)
    rfm: RfmConfig = field(default_factory=RfmConfig)
    methods: tuple = ("dance", "knn_only", "clr_only")
    seed: int = 0
    split_ratios: tuple = (0.4, 0.4, 0.2)
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    baselines: BaselineOptions = field(default_factory=BaselineOptions)
    output_path: Optional[str] = None

    def __post_init__(self):
        if (self.data_path is None) == (self.synthetic is None):
            raise ValidationError("give exactly one of data_path or synthetic")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lam != GRID and not (isinstance(self.lam, (int, float)) and 0 <= self.lam <= 1):
            raise ValidationError(f"lambda must be in [0, 1] or {GRID!r}, got {self.lam!r}")
        if self.mode not in (REUSE, DISJOINT):
            raise ValidationError(f"mode must be {REUSE!r} or {DISJOINT!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ValidationError(f"unknown methods {unknown}; choose from {METHODS}")

    def echo(self):
        """Configuration as plain data, without the output location."""
        out = asdict(self)
        out.pop("output_path")
        out["methods"] = list(self.methods)
        return out

    def load_data(self):
        if self.synthetic is not None:
            return self.synthetic.generate()
        from dance.io import read_dataset

        return read_dataset(self.data_path)


@dataclass(frozen=True)
class MetricsReport:
    method: str
    alpha: float
    lam: Optional[float]
    coverage: float
    mean_set_size: float
    ccv: float
    accuracy: float
    per_class_coverage: dict
    seed: int
    mode: str

    def to_dict(self):
        return {
            "method": self.method,
            "alpha": self.alpha,
            "lambda": self.lam,
            "coverage": self.coverage,
            "mean_set_size": self.mean_set_size,
            "ccv": self.ccv,
            "accuracy": self.accuracy,
            "per_class_coverage": {str(k): self.per_class_coverage[k] for k in sorted(self.per_class_coverage)},
            "seed": self.seed,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    std: float
    per_trial: list
    mean_set_size: float = float("nan")


def subseed(seed, tag):
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]).generate_state(1, np.uint64)[0])


def concat(a, b):
    return EmbeddedDataset(np.vstack([a.embeddings, b.embeddings]), np.concatenate([a.labels, b.labels]),
                           a.class_count, np.concatenate([a.ids, b.ids]))


# -- fitted state -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedPipeline:
    """Everything that stays fixed across calibration/test re-partitions."""

    config: ExperimentConfig
    support: EmbeddedDataset
    cal: EmbeddedDataset
    test: EmbeddedDataset
    model: object

    @property
    def kernel(self):
        return self.model.kernel

    @property
    def feature_matrix(self):
        return self.model.learned_feature_matrix


def fit_pipeline(config):
    data = config.load_data()
    support, cal, test = split_dataset(data, SplitSpec(config.split_ratios, subseed(config.seed, 1)))
    train_rows, val_rows = partition(len(support), (0.8, 0.2), subseed(config.seed, 2))
    _, _, model = tune_hyperparameters(support.subset(train_rows), support.subset(val_rows), config.rfm)
    log.info("RFM: L=%.4g xi=%.4g ridge=%.3g iteration=%d val acc=%.4f", model.kernel.bandwidth,
             model.kernel.shape, model.krr.ridge, model.selected_iteration, model.validation_accuracy)
    return FittedPipeline(config, support, cal, test, model)


# -- scoring ------------------------------------------------------------------

def _effective_config(cfg, available):
    eff = cfg.clamped(available)
    if eff != cfg:
        log.warning("neighborhood sizes capped at %d available reference rows (m_knn=%d, m_clr=%d)",
                    available, eff.m_knn, eff.m_clr)
    return eff


class _Setup:
    """Reference index, threshold set and lambda-selection set for one partition."""

    def __init__(self, fitted, cal, lam_override=None):
        cfg = fitted.config
        m = fitted.feature_matrix
        self.mode = cfg.mode
        need_grid = lam_override is None and cfg.lam == GRID
        if cfg.mode == REUSE:
            self.index = build_index(cal, m)
            self.thr = cal
            self.lam_set = cal if need_grid else None
            inner = partition_sizes(len(cal), (0.8, 0.2))[0] if need_grid else len(cal)
            available = inner - 1
        else:
            self.index = build_index(fitted.support, m)
            if need_grid:
                lam_rows, thr_rows = partition(len(cal), (0.5, 0.5), subseed(cfg.seed, 3))
                self.lam_set, self.thr = cal.subset(lam_rows), cal.subset(thr_rows)
            else:
                self.lam_set, self.thr = None, cal
            available = len(fitted.support)
        if available < 1:
            raise ValidationError("not enough reference rows for neighbor search")
        self.available = available
        self.cfg = _effective_config(cfg.score, available)
        if lam_override is not None:
            self.lam = float(lam_override)
        elif cfg.lam == GRID:
            self.lam = select_lambda(self.lam_set, fitted.kernel, m, cfg.alpha, cfg.lambda_grid, self.cfg,
                                     reference=self.index if cfg.mode == DISJOINT else None,
                                     seed=subseed(cfg.seed, 4))
        else:
            self.lam = float(cfg.lam)


def _needs(methods):
    dance_like = any(m in methods for m in ("dance", "knn_only", "clr_only"))
    probs = any(m in methods for m in ("aps", "raps", "ncp_raps"))
    return dance_like, probs


def score_tables(fitted, setup, data, exclude=None):
    """Full-label score matrices for ``data`` under every requested method."""
    methods = fitted.config.methods
    opts = fitted.config.baselines
    dance_like, probs = _needs(methods)
    out = {}
    if dance_like:
        out["knn"], out["clr"] = dance_score_matrices(setup.index, data.embeddings, fitted.kernel, setup.cfg,
                                                      data.ids, exclude)
    if "deep_knn" in methods:
        k = min(opts.deep_knn_k, setup.available)
        out["deep_knn"] = baselines.deep_knn_score_matrix(setup.index, data.embeddings, k, exclude)
    if probs:
        p = baselines.logits_to_probabilities(fitted.model.predict(data.embeddings))
        if "aps" in methods:
            out["aps"] = baselines.aps_matrix(p)
        if "raps" in methods or "ncp_raps" in methods:
            out["raps"] = baselines.raps_matrix(p, opts.raps_lambda, opts.raps_k)
    return out


def method_sets(fitted, setup, thr_tables, test_tables, test):
    """Boolean label sets on ``test`` for each requested method."""
    cfg = fitted.config
    alpha, lam = cfg.alpha, setup.lam
    rows = np.arange(len(setup.thr))
    y = setup.thr.labels
    out = {}
    if "knn" in thr_tables:
        knn_true, clr_true = thr_tables["knn"][rows, y], thr_tables["clr"][rows, y]
        for name, split in (("dance", lam), ("knn_only", 0.0), ("clr_only", 1.0)):
            if name in cfg.methods:
                q_knn, q_clr = thresholds(knn_true, clr_true, alpha, split)
                out[name] = knn_sets(test_tables["knn"], q_knn, setup.cfg) & threshold_sets(test_tables["clr"], q_clr)
    for name in ("deep_knn", "aps", "raps"):
        if name in cfg.methods:
            q = conformal_quantile(thr_tables[name][rows, y], alpha)
            out[name] = threshold_sets(test_tables[name], q)
    if "ncp_raps" in cfg.methods:
        local = setup.index if setup.mode == REUSE else build_index(setup.thr, fitted.feature_matrix)
        k = min(cfg.baselines.ncp_k, len(setup.thr))
        bandwidth = cfg.baselines.ncp_bandwidth or baselines.ncp_default_bandwidth(local, k)
        qs = baselines.ncp_thresholds(local, thr_tables["raps"][rows, y], test.embeddings, bandwidth, alpha, k)
        out["ncp_raps"] = baselines.ncp_sets(test_tables["raps"], qs)
    return {m: out[m] for m in cfg.methods}


def _thr_exclude(setup):
    return np.arange(len(setup.thr)) if setup.mode == REUSE else None


def evaluate_partition(fitted, cal, test, lam_override=None):
    setup = _Setup(fitted, cal, lam_override)
    thr_tables = score_tables(fitted, setup, setup.thr, _thr_exclude(setup))
    test_tables = score_tables(fitted, setup, test)
    return setup, method_sets(fitted, setup, thr_tables, test_tables, test)


def branch_sets(fitted, cal, test, lam_override=None):
    """DANCE's two branch sets at the split error budgets, and their intersection.

    Unlike the ``knn_only`` and ``clr_only`` methods, which spend the whole
    ``alpha`` on one score, the branches here use ``(1 - lam) * alpha`` and
    ``lam * alpha``.
    """
    setup = _Setup(fitted, cal, lam_override)
    thr = setup.thr
    knn, clr = dance_score_matrices(setup.index, thr.embeddings, fitted.kernel, setup.cfg, thr.ids,
                                    _thr_exclude(setup))
    rows = np.arange(len(thr))
    q_knn, q_clr = thresholds(knn[rows, thr.labels], clr[rows, thr.labels], fitted.config.alpha, setup.lam)
    art = CalibrationArtifact(q_knn, q_clr, fitted.config.alpha, setup.lam, setup.mode, setup.cfg, len(thr))
    test_knn, test_clr = dance_score_matrices(setup.index, test.embeddings, fitted.kernel, setup.cfg, test.ids)
    return membership_from_scores(test_knn, test_clr, art)


def _method_lambda(method, lam):
    return {"dance": lam, "knn_only": 0.0, "clr_only": 1.0}.get(method)


def run_experiment(config):
    fitted = fit_pipeline(config)
    setup, sets = evaluate_partition(fitted, fitted.cal, fitted.test)
    test = fitted.test
    acc = top1_accuracy(fitted.model.predict(test.embeddings), test.labels)
    reports = []
    for method, member in sets.items():
        reports.append(MetricsReport(
            method=method,
            alpha=config.alpha,
            lam=_method_lambda(method, setup.lam),
            coverage=coverage(member, test.labels),
            mean_set_size=mean_set_size(member),
            ccv=ccv(member, test.labels, config.alpha, test.class_count),
            accuracy=acc,
            per_class_coverage=per_class_coverage(member, test.labels, test.class_count),
            seed=config.seed,
            mode=config.mode,
        ))
    return reports


def monte_carlo_coverage(config, trials, fitted=None):
    """Coverage over ``trials`` seeded re-partitions of the calibration+test pool.

    The RFM model stays fixed. A ``"grid"`` lambda is chosen once on the
    initial partition and then held fixed. In disjoint mode the reference
    index never changes, so pool scores are computed once and sliced.
    A supplied ``fitted`` pipeline keeps its model and splits but runs under
    ``config`` (so one fit can serve several alphas, lambdas or methods).
    """
    if trials < 1:
        raise ValidationError("trials must be at least 1")
    fitted = replace(fitted, config=config) if fitted is not None else fit_pipeline(config)
    pool = concat(fitted.cal, fitted.test)
    n_cal = len(fitted.cal)
    lam = _Setup(fitted, fitted.cal).lam if config.lam == GRID else None
    cached = None
    per_trial = {m: [] for m in config.methods}
    sizes = {m: [] for m in config.methods}
    for t in range(trials):
        order = np.random.default_rng(subseed(config.seed, 10_000 + t)).permutation(len(pool))
        cal_rows, test_rows = np.sort(order[:n_cal]), np.sort(order[n_cal:])
        cal, test = pool.subset(cal_rows), pool.subset(test_rows)
        setup = _Setup(fitted, cal, lam)
        if config.mode == DISJOINT:
            if cached is None:
                cached = score_tables(fitted, setup, pool)
            thr_tables = {k: v[cal_rows] for k, v in cached.items()}
            test_tables = {k: v[test_rows] for k, v in cached.items()}
        else:
            thr_tables = score_tables(fitted, setup, cal, _thr_exclude(setup))
            test_tables = score_tables(fitted, setup, test)
        sets = method_sets(fitted, setup, thr_tables, test_tables, test)
        for m, member in sets.items():
            per_trial[m].append(coverage(member, test.labels))
            sizes[m].append(mean_set_size(member))
    out = {}
    for m, covs in per_trial.items():
        arr = np.asarray(covs)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[m] = MonteCarloResult(float(arr.mean()), std, [float(c) for c in covs], float(np.mean(sizes[m])))
    return out
