"""Pipeline stages driven by one JSON config.

Each stage reads what earlier stages wrote into the output directory, so
stages can be rerun individually. File names are fixed.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import cate as cate_mod
from . import dml, learners
from . import policy as pol
from .data import (
    CsvSchema,
    DgpConfig,
    FoldAssignment,
    LotDataset,
    PcaModel,
    assign_folds,
    fit_pca,
    load_dataset,
    load_json,
    save_json,
    simulate_lots,
    transform_pca,
    write_dataset,
)
from .errors import ConfigurationError
from .splines import BasisSpec

EFFECTS = "effects.json"
SCORES = "scores.csv"
NUISANCES = "nuisances.csv"
RMSE = "nuisance_rmse.json"
PCA = "pca.json"
CATE_1D_JSON = "cate_1d.json"
CATE_2D_JSON = "cate_2d.json"
CATE_1D = "cate_1d.csv"
CATE_2D = "cate_2d.csv"
POLICIES = "policies.json"
EVALUATION = "evaluation.csv"
REGIONS = "regions"
REPORT = "report.md"
SIM_DATA = "data.csv"
SIM_ORACLE = "oracle.json"

DEFAULT_GAMMAS = (0.01, 0.03, 0.05)


@dataclass(frozen=True)
class PipelineConfig:
    """Whole-pipeline settings; see the README for the JSON layout."""

    input_csv: str | None = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    simulate: DgpConfig | None = None
    folds: int = 5
    g_learner: learners.LearnerSpec = field(default_factory=lambda: learners.LearnerSpec("gradient_boosting"))
    m_learner: learners.LearnerSpec = field(default_factory=lambda: learners.LearnerSpec("gradient_boosting"))
    tune: bool = False
    trim: tuple = dml.DEFAULT_TRIM
    basis_1d: BasisSpec = field(default_factory=lambda: BasisSpec("bspline_1d", 3, 5))
    basis_2d: BasisSpec | None = field(default_factory=lambda: BasisSpec("tensor_bspline_2d", 2, 5))
    ridge_fallback: bool = True
    gammas: tuple = DEFAULT_GAMMAS
    alpha: float = 0.05
    bootstrap_draws: int = cate_mod.DEFAULT_DRAWS
    seed: int = 0
    out: str = "out"
    features: str = "pca"
    standardize_pca: bool = False
    conservative: bool = False
    greedy: bool = False
    grid_size: int = 50
    region_grid_size: int = 60

    def __post_init__(self):
        if (self.input_csv is None) == (self.simulate is None):
            raise ConfigurationError("config needs exactly one of 'input' or 'simulate'")
        if int(self.folds) < 2:
            raise ConfigurationError("folds must be at least 2")
        if not self.gammas:
            raise ConfigurationError("gamma list must not be empty")
        if any(not (g > 0 and math.isfinite(g)) for g in self.gammas):
            raise ConfigurationError("gammas must be positive")
        if not 0 < self.alpha < 0.5:
            raise ConfigurationError("alpha must lie in (0, 0.5)")
        if self.features not in ("pca", "raw"):
            raise ConfigurationError("features must be 'pca' or 'raw'")
        if int(self.bootstrap_draws) < 1:
            raise ConfigurationError("bootstrap_draws must be positive")
        dml._check_trim(self.trim)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PipelineConfig":
        doc = dict(doc)
        known = {
            "input", "simulate", "folds", "learners", "tune", "trim", "basis_1d", "basis_2d",
            "ridge_fallback", "gammas", "alpha", "bootstrap_draws", "seed", "out", "features",
            "standardize_pca", "conservative", "greedy", "grid_size", "region_grid_size",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "input" in doc:
            inp = doc["input"]
            if not isinstance(inp, Mapping) or "csv" not in inp:
                raise ConfigurationError("'input' needs a 'csv' path")
            kw["input_csv"] = inp["csv"]
            kw["schema"] = CsvSchema.from_mapping(inp.get("schema", {}))
        if "simulate" in doc:
            kw["simulate"] = DgpConfig.from_dict(doc["simulate"])
        lrn = doc.get("learners", {})
        if "g" in lrn:
            kw["g_learner"] = learners.LearnerSpec.from_dict(lrn["g"])
        if "m" in lrn:
            kw["m_learner"] = learners.LearnerSpec.from_dict(lrn["m"])
        if "basis_1d" in doc:
            kw["basis_1d"] = BasisSpec.from_dict(doc["basis_1d"])
        if "basis_2d" in doc:
            kw["basis_2d"] = None if doc["basis_2d"] is None else BasisSpec.from_dict(doc["basis_2d"])
        for key in (
            "folds", "tune", "ridge_fallback", "alpha", "bootstrap_draws", "seed", "out",
            "features", "standardize_pca", "conservative", "greedy", "grid_size", "region_grid_size",
        ):
            if key in doc:
                kw[key] = doc[key]
        if "trim" in doc:
            kw["trim"] = tuple(doc["trim"])
        if "gammas" in doc:
            kw["gammas"] = tuple(float(g) for g in doc["gammas"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_dict(self) -> dict:
        doc = {
            "folds": self.folds,
            "learners": {"g": self.g_learner.to_dict(), "m": self.m_learner.to_dict()},
            "tune": self.tune,
            "trim": list(self.trim),
            "basis_1d": self.basis_1d.to_dict(),
            "basis_2d": None if self.basis_2d is None else self.basis_2d.to_dict(),
            "ridge_fallback": self.ridge_fallback,
            "gammas": list(self.gammas),
            "alpha": self.alpha,
            "bootstrap_draws": self.bootstrap_draws,
            "seed": self.seed,
            "out": self.out,
            "features": self.features,
            "standardize_pca": self.standardize_pca,
            "conservative": self.conservative,
            "greedy": self.greedy,
            "grid_size": self.grid_size,
            "region_grid_size": self.region_grid_size,
        }
        if self.input_csv is not None:
            doc["input"] = {"csv": self.input_csv, "schema": self.schema.to_dict()}
        else:
            doc["simulate"] = self.simulate.to_dict()
        return doc


def load_config(path, base_dir=None) -> PipelineConfig:
    """Read a config file; a relative input CSV path resolves against the
    config file's directory."""
    doc = load_json(path)
    if not isinstance(doc, Mapping):
        raise ConfigurationError("config must be a JSON object")
    cfg = PipelineConfig.from_dict(doc)
    if cfg.input_csv is not None and not Path(cfg.input_csv).is_absolute():
        base = Path(base_dir) if base_dir is not None else Path(path).parent
        cfg = replace(cfg, input_csv=str(base / cfg.input_csv))
    return cfg


def load_data(cfg: PipelineConfig) -> LotDataset:
    if cfg.input_csv is not None:
        return load_dataset(cfg.input_csv, cfg.schema)
    data, _ = simulate_lots(cfg.simulate)
    return data


def _out(cfg) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# stages


def run_simulate(cfg: PipelineConfig) -> dict:
    if cfg.simulate is None:
        raise ConfigurationError("simulate stage needs a 'simulate' block")
    out = _out(cfg)
    data, truth = simulate_lots(cfg.simulate)
    write_dataset(data, out / SIM_DATA)
    save_json(truth.to_dict(), out / SIM_ORACLE)
    return {"n": data.n, "theta_ate": truth.theta_ate}


def _kfold(n, k, seed):
    rng = np.random.Generator(np.random.Philox(key=int(seed) + 7919))
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % k
    return FoldAssignment(k, fold_of)


def tuned_specs(cfg: PipelineConfig, data: LotDataset, folds: FoldAssignment):
    """Grid-search the learners that carry a tuning grid. ``g`` is tuned
    separately on each arm."""
    g0 = g1 = cfg.g_learner
    m = cfg.m_learner
    if not cfg.tune:
        return g0, g1, m
    if cfg.g_learner.tuning_grid:
        for arm in (0, 1):
            idx = np.flatnonzero(data.a == arm)
            k = min(cfg.folds, idx.size)
            spec = learners.tune(cfg.g_learner, data.x[idx], data.y[idx], _kfold(idx.size, k, cfg.seed + arm), False, cfg.seed)
            if arm == 0:
                g0 = spec
            else:
                g1 = spec
    if cfg.m_learner.tuning_grid:
        m = learners.tune(cfg.m_learner, data.x, data.a, folds, True, cfg.seed)
    return g0, g1, m


def crossfit(cfg: PipelineConfig, data: LotDataset):
    folds = assign_folds(data.a, cfg.folds, cfg.seed)
    g0_spec, g1_spec, m_spec = tuned_specs(cfg, data, folds)
    if g0_spec is g1_spec:
        nu = dml.crossfit_nuisances(data, g0_spec, m_spec, folds, cfg.trim, cfg.seed)
    else:
        nu0 = dml.crossfit_nuisances(data, g0_spec, m_spec, folds, cfg.trim, cfg.seed)
        nu1 = dml.crossfit_nuisances(data, g1_spec, m_spec, folds, cfg.trim, cfg.seed)
        # m_hat is already trimmed, so the count carries over unchanged
        nu = dml.NuisancePredictions(
            nu0.g0_hat, nu1.g1_hat, nu0.m_hat, folds, nu0.trim_bounds, nu0.n_trimmed, nu0.n_clamped_classifier
        )
    return nu, (g0_spec, g1_spec, m_spec)


def write_nuisances(nu: dml.NuisancePredictions, data: LotDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lot_id", "fold", "g0_hat", "g1_hat", "m_hat"])
        for i in range(data.n):
            w.writerow(
                [data.lot_id[i], int(nu.folds.fold_of[i]), repr(float(nu.g0_hat[i])), repr(float(nu.g1_hat[i])), repr(float(nu.m_hat[i]))]
            )


def read_nuisances(path, trim, k) -> dml.NuisancePredictions:
    fold, g0, g1, m = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            fold.append(int(row["fold"]))
            g0.append(float(row["g0_hat"]))
            g1.append(float(row["g1_hat"]))
            m.append(float(row["m_hat"]))
    return dml.NuisancePredictions(g0, g1, m, FoldAssignment(k, fold), tuple(trim))


def run_fit(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    nu, (g0_spec, g1_spec, m_spec) = crossfit(cfg, data)
    scores = dml.aipw_scores(data, nu)
    ate = dml.estimate_ate(scores)
    atte = dml.estimate_atte(data, nu)
    rmse_m, rmse_g0, rmse_g1 = learners.nuisance_rmse(nu, data)
    a_bar = float(data.a.mean())
    rmse_doc = {
        "rmse_m": rmse_m,
        "rmse_g0": rmse_g0,
        "rmse_g1": rmse_g1,
        "baseline_rmse_m": learners.rmse(np.full(data.n, a_bar), data.a),
    }
    if cfg.simulate is not None:
        _, truth = simulate_lots(cfg.simulate)
        m_true = truth.m_fn(data.x)
        rmse_doc["noise_floor_g"] = cfg.simulate.noise_sd
        rmse_doc["noise_floor_m"] = float(np.sqrt(np.mean(m_true * (1 - m_true))))
    effects = {
        "schema_version": 1,
        "type": "Effects",
        "n": data.n,
        "folds": cfg.folds,
        "ate": ate.to_dict(),
        "atte": atte.to_dict(),
        "nuisance_rmse": rmse_doc,
        "trim": {
            "bounds": list(nu.trim_bounds),
            "n_trimmed": nu.n_trimmed,
            "n_clamped_classifier": nu.n_clamped_classifier,
        },
        "learners": {"g0": g0_spec.to_dict(), "g1": g1_spec.to_dict(), "m": m_spec.to_dict()},
    }
    pca = fit_pca(data.x, standardize=cfg.standardize_pca)
    save_json(effects, out / EFFECTS)
    save_json(rmse_doc, out / RMSE)
    save_json(pca.to_dict(), out / PCA)
    scores.write_csv(out / SCORES)
    write_nuisances(nu, data, out / NUISANCES)
    return effects


def policy_features(cfg: PipelineConfig, data: LotDataset, out: Path) -> np.ndarray:
    """Matrix the CATE summaries and trees are learned on: PCA scores
    (C_m, C_s, ...) or raw covariates."""
    if cfg.features == "raw":
        return np.array(data.x)
    pca = PcaModel.from_dict(load_json(out / PCA))
    return transform_pca(pca, data.x)


def _load_scores(out: Path, data: LotDataset) -> dml.ScoreElements:
    scores = dml.ScoreElements.read_csv(out / SCORES)
    if scores.n != data.n or list(scores.lot_id) != list(data.lot_id):
        raise ConfigurationError("scores.csv does not match the configured data")
    return scores


def run_cate(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    scores = _load_scores(out, data)
    z = policy_features(cfg, data, out)
    summary = {}
    specs = [("1d", cfg.basis_1d, [0], CATE_1D_JSON, CATE_1D)]
    if cfg.basis_2d is not None and z.shape[1] >= 2:
        specs.append(("2d", cfg.basis_2d, [0, 1], CATE_2D_JSON, CATE_2D))
    for tag, basis, cols, json_name, csv_name in specs:
        xt = z[:, cols]
        if basis.kind == "intercept":
            fit = cate_mod.project_scores(scores.psi_b, np.ones((data.n, 1)), basis)
            sup = [(float(xt[:, j].min()), float(xt[:, j].max())) for j in range(xt.shape[1])]
            axes = [np.linspace(lo, hi, cfg.grid_size) for lo, hi in sup]
            grid = axes[0][:, None] if len(axes) == 1 else np.column_stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")])
        else:
            if basis.q != len(cols):
                raise ConfigurationError(f"basis_{tag} expects {basis.q} input column(s)")
            fit = cate_mod.fit_cate(scores.psi_b, xt, basis, cfg.ridge_fallback)
            grid = cate_mod.default_grid(fit, cfg.grid_size)
        fit = cate_mod.with_draws(fit, cfg.bootstrap_draws, cfg.seed)
        header, rows = cate_mod.grid_table(fit, grid, cfg.alpha, cfg.bootstrap_draws, cfg.seed)
        cate_mod.write_grid_csv(out / csv_name, header, rows)
        doc = fit.to_dict()
        doc["columns"] = cols
        save_json(doc, out / json_name)
        summary[tag] = {"p": fit.p, "ridge": fit.ridge, "n_clamped": fit.n_clamped}
    return summary


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def learn_policies(cfg: PipelineConfig, z, psi_b, fits: Mapping[str, cate_mod.CateFit]):
    """All (method, gamma, name, policy) combinations configured."""
    out = []
    for gamma in cfg.gammas:
        entries = []
        if "1d" in fits:
            entries.append(("CATE 1D", pol.threshold_policy(fits["1d"], gamma, "point", cfg.alpha, (0,))))
        if "2d" in fits:
            entries.append(("CATE 2D", pol.threshold_policy(fits["2d"], gamma, "point", cfg.alpha, (0, 1))))
        entries.append(("Depth-1 Tree", pol.exact_policy_tree(z, psi_b, gamma, 1)))
        entries.append(("Depth-2 Tree", pol.exact_policy_tree(z, psi_b, gamma, 2)))
        if cfg.conservative:
            if "1d" in fits:
                entries.append(("CATE 1D lower CI", pol.threshold_policy(fits["1d"], gamma, "lower_ci", cfg.alpha, (0,))))
            if "2d" in fits:
                entries.append(("CATE 2D lower CI", pol.threshold_policy(fits["2d"], gamma, "lower_ci", cfg.alpha, (0, 1))))
        if cfg.greedy:
            entries.append(("Greedy Depth-1 Tree", pol.greedy_policy_tree(z, psi_b, gamma, 1)))
            entries.append(("Greedy Depth-2 Tree", pol.greedy_policy_tree(z, psi_b, gamma, 2)))
        for method, p in entries:
            out.append((method, gamma, f"{method} (gamma={gamma:g})", p))
    return out


def _load_fit(path) -> cate_mod.CateFit:
    return cate_mod.CateFit.from_dict(load_json(path))


def run_policy(cfg: PipelineConfig) -> list:
    out = _out(cfg)
    data = load_data(cfg)
    scores = _load_scores(out, data)
    z = policy_features(cfg, data, out)
    fits = {"1d": _load_fit(out / CATE_1D_JSON)}
    if (out / CATE_2D_JSON).exists() and cfg.basis_2d is not None:
        fits["2d"] = _load_fit(out / CATE_2D_JSON)
    learned = learn_policies(cfg, z, scores.psi_b, fits)
    nu = read_nuisances(out / NUISANCES, cfg.trim, cfg.folds)

    rows = pol.compare_policies([(name, p) for _, _, name, p in learned], z, scores, data, nu)
    meta = {name: (method, gamma) for method, gamma, name, _ in learned}
    with open(out / EVALUATION, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "gamma"] + pol.ROW_HEADER)
        for row in rows:
            method, gamma = meta.get(row.name, ("Observed", ""))
            w.writerow([method, "" if gamma == "" else repr(float(gamma)), row.name] + [repr(float(v)) for v in row.as_list()[1:]])

    docs = []
    for method, gamma, name, p in learned:
        d = p.to_dict()
        d.update({"name": name, "method": method, "gamma_label": gamma})
        docs.append(d)
    save_json({"schema_version": 1, "features": cfg.features, "policies": docs}, out / POLICIES)

    regions = out / REGIONS
    regions.mkdir(exist_ok=True)
    size = cfg.region_grid_size
    lo, hi = z.min(axis=0), z.max(axis=0)
    axes = [np.linspace(lo[j], hi[j], size) for j in range(z.shape[1])]
    if z.shape[1] == 1:
        grid = axes[0][:, None]
    else:
        mesh = np.meshgrid(*axes[:2], indexing="ij")
        grid = np.zeros((mesh[0].size, z.shape[1]))
        grid[:, 0], grid[:, 1] = mesh[0].ravel(), mesh[1].ravel()
    for _, _, name, p in learned:
        act = p.apply(grid)
        with open(regions / f"{_slug(name)}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"z{j + 1}" for j in range(min(2, z.shape[1]))] + ["action"])
            for g, a in zip(grid, act):
                w.writerow([repr(float(v)) for v in g[:2]] + [int(a)])
    return rows


def run_report(cfg: PipelineConfig) -> str:
    out = _out(cfg)
    eff = load_json(out / EFFECTS)
    lines = ["# Rework policy report", ""]
    for key in ("ate", "atte"):
        e = eff[key]
        lines.append(
            f"- {e['target']}: {e['theta_hat']:.4f} (SE {e['std_error']:.4f}, "
            f"{100 * e['level']:.0f}% CI [{e['ci_lo']:.4f}, {e['ci_hi']:.4f}])"
        )
    r = eff["nuisance_rmse"]
    lines += [
        f"- nuisance RMSE: m {r['rmse_m']:.4f}, g0 {r['rmse_g0']:.4f}, g1 {r['rmse_g1']:.4f}",
        f"- propensities trimmed: {eff['trim']['n_trimmed']}",
        "",
    ]
    if (out / EVALUATION).exists():
        lines += ["| policy | share | GATE | value |", "|---|---:|---:|---:|"]
        with open(out / EVALUATION, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                lines.append(
                    f"| {row['policy']} | {float(row['share']):.4f} | {float(row['gate']):.4f} | {float(row['value']):.4f} |"
                )
    text = "\n".join(lines) + "\n"
    (out / REPORT).write_text(text, encoding="utf-8")
    return text


def run_all(cfg: PipelineConfig) -> None:
    run_fit(cfg)
    run_cate(cfg)
    run_policy(cfg)
    run_report(cfg)
