"""Command-line interface.

Every command reads an optional JSON run configuration (``--config``),
applies flag overrides, validates the result before doing any work, and
writes its outputs into ``--out-dir``.  Exit status is 0 on success, 1 on
invalid input and 2 on any other failure, with a JSON error record on
standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, io
from ._kernels import BACKEND
from .data import (FeatureTable, concatenate_features, dc_table, load_connectivity,
                   load_feature_table, write_feature_table)
from .errors import MFMCError, ValidationError
from .evaluation import (PIPELINES, EvalConfig, explain_table, kind_subsets, run_ablation,
                         run_pipeline_evaluation, select_and_retrain)
from .explain import explanations_csv, force_record, rank_features
from .harmonize import combat_apply, combat_fit
from .metrics import compute_metrics, metrics_table
from .splits import PLAN_KINDS, make_plan
from .stacking import DEFAULT_GRIDS, StackConfig, StackModel, config_from_grid, grid_search, stack_fit
from .stats import group_ttest
from .synth import SynthConfig, truth_path, write_synth

log = logging.getLogger("mfmc")


# ---------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class PlanSpec:
    kind: str = "kfold"
    k: int = 5
    sites: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValidationError(f"plan kind must be one of {PLAN_KINDS}, not {self.kind!r}")
        if self.sites is not None:
            object.__setattr__(self, "sites", tuple(self.sites))


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides its input files.

    ``seed`` is the root seed: it seeds the generator, the outer split
    plan and the inner stacking folds.
    """

    seed: int = 0
    out_dir: str = "mfmc-out"
    table: str | None = None
    model: str | None = None
    synth: dict = field(default_factory=dict)
    stack: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    grid_search: bool = False
    grids: dict | None = None
    top: int = 20
    p_threshold: float = 0.05
    features: tuple[str, ...] | None = None
    ingest: dict = field(default_factory=dict)
    pipelines: tuple[str, ...] = PIPELINES

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.top, int) or self.top < 1:
            raise ValidationError(f"top must be a positive integer, got {self.top!r}")
        if not 0.0 <= float(self.p_threshold) <= 1.0:
            raise ValidationError("p_threshold must lie in [0, 1]")
        for p in self.pipelines:
            if p not in PIPELINES:
                raise ValidationError(f"unknown pipeline {p!r}; expected {PIPELINES}")
        unknown = set(self.ingest) - {"features", "connectivity", "dc_threshold"}
        if unknown:
            raise ValidationError(f"unknown ingest option(s): {sorted(unknown)}")
        if self.grids is not None:
            bad = set(self.grids) - set(DEFAULT_GRIDS)
            if bad:
                raise ValidationError(f"grids for unknown learner(s): {sorted(bad)}")
        # build every section once so that bad values fail before any work
        self.synth_config()
        self.eval_config()
        self.plan_spec()

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ValidationError("run configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown configuration key(s): {sorted(unknown)}")
        d = dict(d)
        for key in ("features", "pipelines"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def synth_config(self) -> SynthConfig:
        if "seed" in self.synth:
            raise ValidationError("set the generator seed with the root 'seed' key")
        return SynthConfig.from_dict({**self.synth, "seed": self.seed})

    def stack_config(self) -> StackConfig:
        if "seed" in self.stack:
            raise ValidationError("set the stacking seed with the root 'seed' key")
        return StackConfig.from_dict({**self.stack, "seed": self.seed})

    def eval_config(self) -> EvalConfig:
        unknown = set(self.evaluation) - {"pipeline", "combat", "combat_prior_pooling",
                                          "reference_accuracy"}
        if unknown:
            raise ValidationError(f"unknown evaluation option(s): {sorted(unknown)}")
        return EvalConfig(stack=self.stack_config(), **self.evaluation)

    def plan_spec(self) -> PlanSpec:
        unknown = set(self.plan) - {"kind", "k", "sites"}
        if unknown:
            raise ValidationError(f"unknown plan option(s): {sorted(unknown)}")
        return PlanSpec(**self.plan)

    def resolved(self) -> dict:
        """Configuration with every default filled in, for report echoes."""
        d = asdict(self)
        d["synth"] = self.synth_config().to_dict()
        d["evaluation"] = self.eval_config().to_dict()
        d["stack"] = d["evaluation"].pop("stack")
        d["plan"] = asdict(self.plan_spec())
        for key in ("features", "pipelines"):
            if d[key] is not None:
                d[key] = list(d[key])
        if d["plan"]["sites"] is not None:
            d["plan"]["sites"] = list(d["plan"]["sites"])
        d["grids"] = self.grids if self.grids is not None else DEFAULT_GRIDS
        return d


def _set(d: dict, key: str, value):
    if value is not None:
        d[key] = value


def build_config(args) -> RunConfig:
    raw = io.read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ValidationError("run configuration must be a JSON object")
    raw = json.loads(json.dumps(raw))
    _set(raw, "seed", args.seed)
    _set(raw, "out_dir", args.out_dir)
    _set(raw, "table", getattr(args, "table", None))
    _set(raw, "model", getattr(args, "model", None))
    _set(raw, "top", getattr(args, "top", None))
    _set(raw, "p_threshold", getattr(args, "p_threshold", None))
    if getattr(args, "grid_search", False):
        raw["grid_search"] = True
    if getattr(args, "features", None):
        raw["features"] = [s for s in args.features.split(",") if s]
    if getattr(args, "pipelines", None):
        raw["pipelines"] = [s for s in args.pipelines.split(",") if s]
    plan = dict(raw.get("plan", {}))
    _set(plan, "kind", getattr(args, "plan", None))
    _set(plan, "k", getattr(args, "k", None))
    if getattr(args, "sites", None):
        plan["sites"] = [s for s in args.sites.split(",") if s]
    if plan:
        raw["plan"] = plan
    ev = dict(raw.get("evaluation", {}))
    _set(ev, "combat", getattr(args, "combat", None))
    _set(ev, "pipeline", getattr(args, "pipeline", None))
    _set(ev, "reference_accuracy", getattr(args, "reference_accuracy", None))
    if ev:
        raw["evaluation"] = ev
    synth = dict(raw.get("synth", {}))
    _set(synth, "n_sites", getattr(args, "n_sites", None))
    _set(synth, "subjects_per_site", getattr(args, "subjects_per_site", None))
    _set(synth, "effect", getattr(args, "effect", None))
    _set(synth, "site_shift", getattr(args, "site_shift", None))
    _set(synth, "site_scale", getattr(args, "site_scale", None))
    if synth:
        raw["synth"] = synth
    ingest = dict(raw.get("ingest", {}))
    if getattr(args, "blocks", None):
        ingest["features"] = list(args.blocks)
    _set(ingest, "connectivity", getattr(args, "connectivity", None))
    _set(ingest, "dc_threshold", getattr(args, "dc_threshold", None))
    if ingest:
        raw["ingest"] = ingest
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ValidationError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# helpers

def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _report(cfg: RunConfig, command: str, body: dict) -> dict:
    return io.envelope("report", {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.resolved(),
        **body,
    })


def _write_reports(cfg: RunConfig, name: str, report: dict, text: str) -> None:
    io.write_json(_out(cfg) / f"{name}.json", report)
    io.atomic_write_text(_out(cfg) / f"{name}.txt", text)


def _table(cfg: RunConfig) -> FeatureTable:
    if not cfg.table:
        raise ValidationError("no input table; pass --table or set 'table' in the config")
    return load_feature_table(cfg.table)


def _model(cfg: RunConfig) -> StackModel:
    if not cfg.model:
        raise ValidationError("no model; pass --model or set 'model' in the config")
    return StackModel.from_dict(io.read_json(cfg.model))


def _plan(cfg: RunConfig, t: FeatureTable):
    spec = cfg.plan_spec()
    return make_plan(t, spec.kind, spec.k, cfg.seed, spec.sites)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig) -> None:
    sc = cfg.synth_config()
    path = _out(cfg) / "table.csv"
    table, truth = write_synth(sc, path)
    body = {"outputs": ["table.csv", truth_path(path).name],
            "n_subjects": table.n_subjects, "n_features": table.n_features,
            "sites": table.sites, "planted_names": list(truth.planted_names)}
    text = (f"synthetic table: {table.n_subjects} subjects x {table.n_features} features, "
            f"{len(table.sites)} sites, seed {cfg.seed}\n"
            f"planted features: {', '.join(truth.planted_names)}\n")
    _write_reports(cfg, "synth.report", _report(cfg, "synth", body), text)


def cmd_ingest(cfg: RunConfig) -> None:
    paths = cfg.ingest.get("features") or []
    if not paths:
        raise ValidationError("ingest needs at least one feature block (--blocks)")
    parts = [load_feature_table(p) for p in paths]
    conn = cfg.ingest.get("connectivity")
    if conn:
        first = parts[0]
        mats = [load_connectivity(Path(conn) / f"{sid}.fc.csv") for sid in first.subject_ids]
        parts.append(dc_table(mats, first.site_ids, first.labels,
                              threshold=float(cfg.ingest.get("dc_threshold", 0.0))))
    table = concatenate_features(parts)
    write_feature_table(table, _out(cfg) / "table.csv")
    body = {"outputs": ["table.csv"], "block_widths": [p.n_features for p in parts],
            "n_subjects": table.n_subjects, "n_features": table.n_features}
    text = f"ingested {len(parts)} block(s): {table.n_subjects} subjects x {table.n_features} features\n"
    _write_reports(cfg, "ingest.report", _report(cfg, "ingest", body), text)


def cmd_harmonize(cfg: RunConfig) -> None:
    t = _table(cfg)
    ec = cfg.eval_config()
    m = combat_fit(t, prior_pooling=ec.combat_prior_pooling)
    h = combat_apply(m, t)
    write_feature_table(h, _out(cfg) / "harmonized.csv")
    io.write_json(_out(cfg) / "combat.json", m.to_dict())
    before = _site_gap(t)
    after = _site_gap(h)
    body = {"outputs": ["harmonized.csv", "combat.json"], "sites": list(m.sites),
            "eb_iterations": m.iterations, "max_site_mean_gap_before": before,
            "max_site_mean_gap_after": after}
    text = (f"ComBat over {len(m.sites)} sites ({m.iterations} EB iterations)\n"
            f"max standardized site-mean gap: {before:.4f} -> {after:.4f}\n")
    _write_reports(cfg, "harmonize.report", _report(cfg, "harmonize", body), text)


def _site_gap(t: FeatureTable) -> float:
    """Largest |site mean - grand mean| over features, in pooled-std units."""
    x = t.values
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    site = np.array(t.site_ids)
    gaps = [np.abs(x[site == s].mean(axis=0) - x.mean(axis=0)) / sd for s in t.sites]
    return float(np.max(gaps))


def cmd_train(cfg: RunConfig) -> None:
    t = _table(cfg)
    ec = cfg.eval_config()
    sc = ec.stack
    grid = None
    if cfg.grid_search:
        grid = grid_search(t, cfg.grids, folds=sc.inner_folds, seed=cfg.seed)
        sc = config_from_grid(sc, grid)
    combat = combat_fit(t, prior_pooling=ec.combat_prior_pooling) if ec.combat != "off" else None
    m = stack_fit(t, sc, combat=combat)
    io.write_json(_out(cfg) / "model.json", m.to_dict())
    train_pred = (m.predict_table(t) > 0.5).astype(np.int64)
    train_report = compute_metrics(t.y, train_pred)
    oof = {name: compute_metrics(t.y, (m.oof[:, j] > 0.5).astype(np.int64)).to_dict()
           for j, name in enumerate(sc.learners)}
    body = {"outputs": ["model.json"], "stack_config": sc.to_dict(),
            "meta_width": len(m.layout), "meta_trees": len(m.meta.trees),
            "meta_skipped_rounds": m.meta.skipped_rounds,
            "training_metrics": train_report.to_dict(), "oof_metrics": oof,
            "grid_search": {k: v.to_dict() for k, v in grid.items()} if grid else None,
            "harmonized": combat is not None}
    text = metrics_table([("training", train_report)], "stack fitted on the full table")
    text += "".join(f"OOF accuracy {n}: {100 * r['accuracy']:.2f}\n" for n, r in oof.items())
    _write_reports(cfg, "train.report", _report(cfg, "train", body), text)


def cmd_evaluate(cfg: RunConfig) -> None:
    t = _table(cfg)
    plan = _plan(cfg, t)
    rep = run_pipeline_evaluation(t, plan, cfg.eval_config())
    body = {"outputs": ["evaluation.json", "evaluation.txt"], "evaluation": rep.to_dict()}
    _write_reports(cfg, "evaluation", _report(cfg, "evaluate", body), rep.to_text())


def cmd_explain(cfg: RunConfig) -> None:
    t = _table(cfg)
    m = _model(cfg)
    ex = explain_table(m, t)
    ranking = rank_features(ex, cfg.top)
    out = _out(cfg)
    io.atomic_write_text(out / "shap.csv", explanations_csv(ex))
    io.atomic_write_text(out / "ranking.csv", ranking.to_csv())
    io.write_json(out / "force_records.json", [force_record(e) for e in ex])
    worst = max(abs(e.reconstructed_margin - e.margin) for e in ex)
    body = {"outputs": ["shap.csv", "ranking.csv", "force_records.json"],
            "base_value": ex[0].base_value, "n_explained": len(ex),
            "max_additivity_error": worst,
            "ranking": [{"rank": r, "feature": n, "mean_abs_shap": v} for n, v, r in ranking.entries],
            "excluded_mean_abs_shap": ranking.excluded}
    text = f"base value (margin): {ex[0].base_value:.4f}; {len(ex)} subjects explained\n"
    text += "".join(f"{r:>3}  {n:<24} {v:.4f}\n" for n, v, r in ranking.entries)
    if ranking.excluded:
        text += "excluded from ranking: " + ", ".join(
            f"{n} {v:.4f}" for n, v in ranking.excluded.items()) + "\n"
    _write_reports(cfg, "explain.report", _report(cfg, "explain", body), text)


def cmd_select(cfg: RunConfig) -> None:
    t = _table(cfg)
    m = _model(cfg)
    ex = explain_table(m, t)
    plan = _plan(cfg, t)
    res = select_and_retrain(t, ex, cfg.top, cfg.p_threshold, plan, cfg.eval_config())
    body = {"outputs": ["selection.json", "selection.txt"], "selection": res.to_dict()}
    text = f"top {len(res.top_features)} by mean |SHAP|, kept {len(res.selected)} with p < {cfg.p_threshold}\n"
    text += "".join(f"  {n:<24} p={res.p_values[n]:.3g}\n" for n in res.selected)
    text += "\n" + res.report.to_text()
    _write_reports(cfg, "selection", _report(cfg, "select", body), text)


def cmd_group_stats(cfg: RunConfig) -> None:
    t = _table(cfg)
    rep = group_ttest(t, cfg.features)
    body = {"outputs": ["group_stats.json", "group_stats.txt"], "group_stats": rep.to_dict()}
    _write_reports(cfg, "group_stats", _report(cfg, "group-stats", body), rep.to_text())


def cmd_ablate(cfg: RunConfig) -> None:
    t = _table(cfg)
    plan = _plan(cfg, t)
    rep = run_ablation(t, plan, cfg.eval_config(), pipelines=cfg.pipelines, subsets=kind_subsets())
    body = {"outputs": ["ablation.json", "ablation.txt"], "ablation": rep.to_dict()}
    _write_reports(cfg, "ablation", _report(cfg, "ablate", body), rep.to_text())


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "harmonize": cmd_harmonize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "select": cmd_select,
    "group-stats": cmd_group_stats,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--seed", type=int, help="root seed for every random choice (default 0)")
    common.add_argument("--out-dir", help="directory for outputs (default mfmc-out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    table = _Parser(add_help=False)
    table.add_argument("--table", help="feature table CSV (subject_id,site,label,<features>)")

    model = _Parser(add_help=False)
    model.add_argument("--model", help="stack model JSON written by 'train'")

    plan = _Parser(add_help=False)
    plan.add_argument("--plan", choices=PLAN_KINDS, help="split plan (default kfold)")
    plan.add_argument("--k", type=int, help="folds for the kfold plan (default 5)")
    plan.add_argument("--sites", help="comma-separated held-out sites for loso/combined")
    plan.add_argument("--combat", choices=("off", "global", "strict"),
                      help="harmonization mode (default global)")
    plan.add_argument("--reference-accuracy", type=float,
                      help="accuracy (fraction) subtracted from each split's accuracy")

    p = _Parser(prog="mfmc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mfmc {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-site table")
    s.add_argument("--n-sites", type=int, help="number of sites (default 4)")
    s.add_argument("--subjects-per-site", type=int, help="subjects per site (default 100)")
    s.add_argument("--effect", type=float, help="planted effect size in noise-std units (default 1.0)")
    s.add_argument("--site-shift", type=float, help="std of site location offsets (default 0)")
    s.add_argument("--site-scale", type=float, help="std of site log-scale factors (default 0)")

    s = sub.add_parser("ingest", parents=[common], help="concatenate feature blocks into one table")
    s.add_argument("--blocks", nargs="+", help="feature block CSVs sharing one subject set")
    s.add_argument("--connectivity", help="directory of <subject_id>.fc.csv Fisher-z matrices")
    s.add_argument("--dc-threshold", type=float, help="edge threshold for degree centrality (default 0)")

    sub.add_parser("harmonize", parents=[common, table], help="fit and apply ComBat")

    s = sub.add_parser("train", parents=[common, table], help="fit the stacked model")
    s.add_argument("--grid-search", action="store_true",
                   help="tune each learner by stratified CV before fitting")
    s.add_argument("--combat", choices=("off", "global"),
                   help="harmonize the table before training (default global)")

    s = sub.add_parser("evaluate", parents=[common, table, plan], help="evaluate under a split plan")
    s.add_argument("--pipeline", choices=PIPELINES, help="model to evaluate (default stack)")

    s = sub.add_parser("explain", parents=[common, table, model], help="SHAP attributions")
    s.add_argument("--top", type=int, help="features in the ranking (default 20)")

    s = sub.add_parser("select", parents=[common, table, model, plan],
                       help="top features by SHAP and t-test, then re-evaluate")
    s.add_argument("--top", type=int, help="features taken from the SHAP ranking (default 20)")
    s.add_argument("--p-threshold", type=float, help="keep features with p below this (default 0.05)")

    s = sub.add_parser("group-stats", parents=[common, table], help="MDD vs NC t-test per feature")
    s.add_argument("--features", help="comma-separated feature names (default all)")

    s = sub.add_parser("ablate", parents=[common, table, plan],
                       help="every feature-kind subset x every pipeline")
    s.add_argument("--pipelines", help=f"comma-separated subset of {','.join(PIPELINES)}")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        return _fail(1, "validation", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            cfg = build_config(args)
            COMMANDS[args.command](cfg)
    except ValidationError as exc:
        return _fail(1, "validation", str(exc))
    except MFMCError as exc:
        return _fail(2, "runtime", str(exc))
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        return _fail(2, "runtime", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
