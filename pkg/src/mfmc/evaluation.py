"""Run a pipeline over a split plan and collect reports.

A pipeline is optional ComBat harmonization, z-scoring fitted on the
training rows, and either the stack or one single classifier.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import io
from .data import FEATURE_KINDS, FeatureTable, feature_kind
from .errors import ValidationError
from .explain import ShapExplanation, explain_rows, rank_features
from .harmonize import combat_add_sites, combat_apply, combat_fit
from .metrics import Aggregate, MetricsReport, aggregate, aggregate_table, compute_metrics, metrics_table
from .splits import SplitPlan
from .stacking import SINGLE_LEARNERS, StackConfig, StackModel, single_fit, stack_fit
from .stats import group_ttest

log = logging.getLogger(__name__)

COMBAT_MODES = ("off", "global", "strict")
PIPELINES = SINGLE_LEARNERS + ("stack",)


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings.

    ``combat`` is ``"global"`` (fit once on every subject, labels unused),
    ``"strict"`` (fit on each split's training rows; held-out sites get
    their own location/scale from their unlabeled data) or ``"off"``.
    ``reference_accuracy`` (a fraction) turns on the per-split
    accuracy difference column.
    """

    stack: StackConfig = field(default_factory=StackConfig)
    pipeline: str = "stack"
    combat: str = "global"
    combat_prior_pooling: str = "sites"
    reference_accuracy: float | None = None

    def __post_init__(self):
        if isinstance(self.stack, dict):
            object.__setattr__(self, "stack", StackConfig.from_dict(self.stack))
        if self.pipeline not in PIPELINES:
            raise ValidationError(f"pipeline must be one of {PIPELINES}, not {self.pipeline!r}")
        if self.combat not in COMBAT_MODES:
            raise ValidationError(f"combat mode must be one of {COMBAT_MODES}, not {self.combat!r}")
        if self.reference_accuracy is not None and not 0.0 <= self.reference_accuracy <= 1.0:
            raise ValidationError("reference_accuracy is a fraction in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def fit_pipeline(train: FeatureTable, cfg: EvalConfig):
    """Fitted model with ``predict_proba(values)`` for harmonized rows."""
    if cfg.pipeline == "stack":
        return stack_fit(train, cfg.stack)
    return single_fit(train, cfg.pipeline, cfg.stack.learner_params(cfg.pipeline),
                      zscore=cfg.stack.zscore)


def harmonize_split(t: FeatureTable, train: np.ndarray, test: np.ndarray, cfg: EvalConfig,
                    global_model=None) -> tuple[FeatureTable, FeatureTable]:
    tr, te = t.take(train), t.take(test)
    if cfg.combat == "off":
        return tr, te
    if cfg.combat == "global":
        return combat_apply(global_model, tr), combat_apply(global_model, te)
    m = combat_fit(tr, prior_pooling=cfg.combat_prior_pooling)
    m_test = combat_add_sites(m, te)
    return combat_apply(m, tr), combat_apply(m_test, te)


@dataclass(frozen=True)
class SplitResult:
    name: str
    subject_ids: tuple[str, ...]
    probabilities: np.ndarray = field(repr=False)
    report: MetricsReport = None

    def to_dict(self) -> dict:
        return {"name": self.name, "subject_ids": list(self.subject_ids),
                "probabilities": self.probabilities.tolist(), "metrics": self.report.to_dict()}


@dataclass(frozen=True)
class EvaluationReport:
    plan_kind: str
    seed: int | None
    config: EvalConfig
    splits: tuple[SplitResult, ...]
    pooled: MetricsReport
    summary: Aggregate

    @property
    def accuracy(self) -> float:
        """Mean per-split accuracy."""
        return self.summary.mean["accuracy"]

    def to_dict(self) -> dict:
        return io.envelope("evaluation", {
            "plan": self.plan_kind,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "splits": [s.to_dict() for s in self.splits],
            "pooled": self.pooled.to_dict(),
            "aggregate": self.summary.to_dict(),
        })

    def to_text(self) -> str:
        title = f"{self.config.pipeline} / plan={self.plan_kind} / combat={self.config.combat}"
        out = metrics_table([(s.name, s.report) for s in self.splits], title)
        out += "\n" + metrics_table([("pooled", self.pooled)])
        out += "\n" + aggregate_table([("mean±std over splits", self.summary)])
        if "delta_accuracy" in self.summary.mean:
            m, sd = self.summary.mean["delta_accuracy"], self.summary.std["delta_accuracy"]
            out += f"dAccuracy (mean±std): {100 * m:+.2f}±{100 * sd:.2f}\n"
        return out


def run_pipeline_evaluation(t: FeatureTable, plan: SplitPlan,
                            cfg: EvalConfig | None = None) -> EvaluationReport:
    """Fit on every split's training rows and score its test rows."""
    cfg = cfg or EvalConfig()
    if plan.kind in ("loso", "combined"):
        plan.check_site_disjoint(t)
    y = t.y
    global_model = combat_fit(t, prior_pooling=cfg.combat_prior_pooling) if cfg.combat == "global" else None
    results = []
    for s in plan:
        tr, te = harmonize_split(t, s.train, s.test, cfg, global_model)
        model = fit_pipeline(tr, cfg)
        p = np.atleast_1d(model.predict_proba(te.values))
        report = compute_metrics(y[s.test], (p > 0.5).astype(np.int64))
        report = report.with_delta(cfg.reference_accuracy)
        results.append(SplitResult(s.name, te.subject_ids, p, report))
        log.info("split %s: accuracy %.4f", s.name, report.accuracy)
    all_true = np.concatenate([y[s.test] for s in plan])
    all_pred = np.concatenate([(r.probabilities > 0.5).astype(np.int64) for r in results])
    pooled = compute_metrics(all_true, all_pred).with_delta(cfg.reference_accuracy)
    return EvaluationReport(plan.kind, plan.seed, cfg, tuple(results), pooled,
                            aggregate([r.report for r in results]))


# ---------------------------------------------------------------------------
# explanation of a fitted stack

def explain_table(m: StackModel, t: FeatureTable) -> list[ShapExplanation]:
    """Attributions of the meta model's margin for every subject of ``t``
    (harmonized with the stack's ComBat model, if it has one)."""
    meta_x = m.predict_meta_matrix(m.prepare_table(t))
    return explain_rows(m.meta, meta_x, m.layout, t.subject_ids)


# ---------------------------------------------------------------------------
# feature selection and retraining

@dataclass(frozen=True)
class SelectionResult:
    top_features: tuple[str, ...]
    selected: tuple[str, ...]
    p_values: dict
    report: EvaluationReport

    def to_dict(self) -> dict:
        return io.envelope("selection", {
            "top_features": list(self.top_features),
            "p_values": self.p_values,
            "selected": list(self.selected),
            "evaluation": self.report.to_dict(),
        })


def select_and_retrain(t: FeatureTable, explanations: Sequence[ShapExplanation], top_k: int,
                       p_threshold: float, plan: SplitPlan,
                       cfg: EvalConfig | None = None) -> SelectionResult:
    """Keep the ``top_k`` features by mean |SHAP| whose group t-test gives
    ``p < p_threshold``, then evaluate the pipeline on those columns only."""
    ranking = rank_features(explanations, top_k)
    top = ranking.names
    missing = [n for n in top if n not in t.feature_names]
    if missing:
        raise ValidationError(f"explained features not in the table: {missing[:5]}")
    stats = group_ttest(t, top).by_name()
    p_values = {n: stats[n].p for n in top}
    selected = [n for n in top if p_values[n] < p_threshold]
    if not selected:
        best = min(p_values.items(), key=lambda kv: kv[1])
        raise ValidationError(
            f"no feature among the top {len(top)} has p < {p_threshold}; "
            f"smallest p is {best[1]:.3g} ({best[0]})"
        )
    report = run_pipeline_evaluation(t.select(selected), plan, cfg)
    return SelectionResult(tuple(top), tuple(selected), p_values, report)


# ---------------------------------------------------------------------------
# ablation over feature kinds

def kind_subsets(kinds: Sequence[str] = FEATURE_KINDS) -> list[tuple[str, ...]]:
    """Every non-empty subset, singles first, in declaration order."""
    return [c for r in range(1, len(kinds) + 1) for c in itertools.combinations(kinds, r)]


def columns_of_kinds(t: FeatureTable, kinds: Sequence[str]) -> list[str]:
    return [n for n in t.feature_names if feature_kind(n) in kinds]


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[tuple[tuple[str, ...], str, EvaluationReport], ...]

    def accuracy(self, kinds: Sequence[str], pipeline: str) -> float:
        for k, p, r in self.rows:
            if k == tuple(kinds) and p == pipeline:
                return r.accuracy
        raise KeyError((tuple(kinds), pipeline))

    def to_dict(self) -> dict:
        return io.envelope("ablation", {
            "rows": [{"kinds": list(k), "pipeline": p, "aggregate": r.summary.to_dict(),
                      "pooled": r.pooled.to_dict()} for k, p, r in self.rows],
        })

    def to_text(self) -> str:
        pipelines = list(dict.fromkeys(p for _, p, _ in self.rows))
        combos = list(dict.fromkeys(k for k, _, _ in self.rows))
        cell = {(k, p): r.summary.formatted("accuracy") for k, p, r in self.rows}
        header = ["features"] + pipelines
        body = [[" & ".join(k)] + [cell.get((k, p), "") for p in pipelines] for k in combos]
        widths = [max(len(r[j]) for r in [header, *body]) for j in range(len(header))]
        lines = ["accuracy (%) mean±std over splits"]
        for row in [header, ["-" * w for w in widths], *body]:
            lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w)
                                   for j, (c, w) in enumerate(zip(row, widths))).rstrip())
        return "\n".join(lines) + "\n"


def run_ablation(t: FeatureTable, plan: SplitPlan, cfg: EvalConfig | None = None,
                 pipelines: Sequence[str] = PIPELINES,
                 subsets: Sequence[Sequence[str]] | None = None) -> AblationReport:
    """Evaluate each pipeline on each feature-kind subset."""
    cfg = cfg or EvalConfig()
    subsets = kind_subsets() if subsets is None else [tuple(s) for s in subsets]
    rows = []
    for kinds in subsets:
        cols = columns_of_kinds(t, kinds)
        if not cols:
            raise ValidationError(f"table has no columns of kind(s) {kinds}")
        sub = t.select(cols)
        for p in pipelines:
            c = EvalConfig(cfg.stack, p, cfg.combat, cfg.combat_prior_pooling,
                           cfg.reference_accuracy)
            rows.append((tuple(kinds), p, run_pipeline_evaluation(sub, plan, c)))
    return AblationReport(tuple(rows))
