"""Experiment configuration and the gen / train / report pipelines.

Each pipeline reads and writes plain files in a run directory so the steps can
run as separate processes. Manifests hold only deterministic content (config,
file digests, dataset metadata); wall-clock timings go to ``timings.json``.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import dataset as ds
from .dimengine import DimTrajectory, SimulationGrid
from .instruments import (dump_portfolio_file, load_portfolio_file, single_swap_templates,
                          six_swap_templates)
from .mva import FundingParams, mva_quadrature, relative_errors
from .neuralnet import MlpModel, TrainConfig, forward, train
from .simm import load_simm_config

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


FULL_SCALE_DEFAULTS = {
    "setting": "vasicek",
    "with_spread": True,
    "bounds": None,
    "portfolio": "single",
    "grid": {"n_times": 160, "t_final": 6.0},
    "sizes": {"k_train": 2 ** 22, "k_val": 2 ** 9, "m_val": 2 ** 20},
    "ladder_min": 2 ** 9,
    "trials": 20,
    "train": {},
    "simm": None,
    "funding": {"recovery": 0.4, "lambda_b": 1.67e-2, "lambda_c": 0.0, "im_spread": 0.0},
    "seeds": {"train": 1, "val": 2, "trial": 100, "stress": 3},
    "workers": 1,
    "t_gamma": None,
    "stress": None,
    "output_dir": "run",
}

DESK_OVERRIDES = {
    "grid": {"n_times": 40, "t_final": 6.0},
    "sizes": {"k_train": 2 ** 17, "k_val": 64, "m_val": 2 ** 14},
    "ladder_min": 2 ** 12,
    "trials": 3,
    "train": {"max_steps": 2000, "precision": "float32"},
}


def preset(name: str) -> dict:
    cfg = copy.deepcopy(FULL_SCALE_DEFAULTS)
    if name == "desk":
        cfg.update(copy.deepcopy(DESK_OVERRIDES))
    elif name != "full":
        raise ConfigError(f"unknown preset {name!r}")
    return cfg


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(FULL_SCALE_DEFAULTS))
    base_dir: Path = Path(".")

    def __post_init__(self):
        unknown = set(self.raw) - set(FULL_SCALE_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = copy.deepcopy(FULL_SCALE_DEFAULTS)
        merged.update(self.raw)
        self.raw = merged
        try:
            self.setting = ds.Setting(merged["setting"], bool(merged["with_spread"]))
            self.bounds = (ds.StateBounds.from_dict(merged["bounds"]) if merged["bounds"]
                           else self.setting.default_bounds())
            self.grid = SimulationGrid(int(merged["grid"]["n_times"]), float(merged["grid"]["t_final"]))
            self.train_cfg = TrainConfig.from_dict(merged["train"])
            self.funding = FundingParams(**merged["funding"])
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.bounds.names != self.setting.names:
            raise ConfigError(f"bounds cover {self.bounds.names}, setting needs {self.setting.names}")
        sizes = merged["sizes"]
        for key in ("k_train", "k_val", "m_val"):
            if int(sizes.get(key, 0)) < 1:
                raise ConfigError(f"sizes.{key} must be >= 1")
        if int(merged["trials"]) < 1 or int(merged["workers"]) < 1:
            raise ConfigError("trials and workers must be >= 1")
        for key in ("portfolio", "simm"):
            v = merged[key]
            if v not in (None, "single", "six") and not self._path(v).exists():
                raise ConfigError(f"{key} file {v} does not exist")

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls(raw, path.parent)

    @property
    def templates(self):
        p = self.raw["portfolio"]
        if p == "single":
            return single_swap_templates()
        if p == "six":
            return six_swap_templates()
        return load_portfolio_file(self._path(p))

    @property
    def simm(self):
        p = self.raw["simm"]
        return load_simm_config(None if p is None else self._path(p))

    @property
    def sizes(self) -> dict:
        return {k: int(v) for k, v in self.raw["sizes"].items()}

    @property
    def seeds(self) -> dict:
        return {k: int(v) for k, v in self.raw["seeds"].items()}

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    @property
    def output_dir(self) -> Path:
        return self._path(self.raw["output_dir"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen


def run_gen(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes, seeds, simm = cfg.sizes, cfg.seeds, cfg.simm
    templates = cfg.templates
    timings = {}
    t = time.perf_counter()
    tr = ds.generate_training(cfg.setting, cfg.bounds, sizes["k_train"], templates, cfg.grid,
                              seeds["train"], simm, workers=cfg.workers)
    timings["train_set_s"] = time.perf_counter() - t
    t = time.perf_counter()
    va = ds.generate_validation(cfg.setting, cfg.bounds, sizes["k_val"], sizes["m_val"], templates,
                                cfg.grid, seeds["val"], simm, workers=cfg.workers)
    timings["validation_set_s"] = time.perf_counter() - t
    tr.save(out / "train.bin")
    va.save(out / "val.bin")
    dump_portfolio_file(templates, out / "portfolio.json")
    manifest = {
        "config": cfg.to_dict(),
        "files": {name: ds.file_digest(out / name) for name in ("train.bin", "val.bin", "portfolio.json")},
        "train_rows": len(tr), "train_skipped": len(tr.metadata["skipped_rows"]),
        "val_rows": len(va), "val_max_stderr": va.max_stderr(),
        "val_peak_dim": float(va.labels.max()) if va.labels.size else 0.0,
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timings.json", timings)
    return manifest


# ---------------------------------------------------------------------------
# train


def ladder_sizes(k_min: int, k_max: int) -> list:
    """Powers of two from ``k_min`` up to ``k_max`` (``k_max`` always included)."""
    if k_min < 1 or k_max < 1:
        raise ValueError("ladder sizes must be positive")
    out = []
    k = 1 << max(0, int(np.ceil(np.log2(k_min))))
    while k < k_max:
        out.append(k)
        k *= 2
    out.append(k_max)
    return out


def shuffled_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 3]).permutation(n)


def t_confidence(values, level: float = 0.95):
    """Mean and t-distribution half-width with ``R - 1`` degrees of freedom."""
    v = np.asarray(values, dtype=float)
    mean = float(np.mean(v))
    if len(v) < 2:
        return mean, float("nan")
    q = stats.t.ppf(0.5 + level / 2, len(v) - 1)
    return mean, float(q * np.std(v, ddof=1) / np.sqrt(len(v)))


def loglog_slope(ks, rmses) -> float:
    """Least-squares slope of ``log2 rmse`` against ``log2 k``."""
    slope, _ = np.polyfit(np.log2(np.asarray(ks, float)), np.log2(np.asarray(rmses, float)), 1)
    return float(slope)


def train_trials(train_set, val_set, train_cfg: TrainConfig, k_values, trials: int,
                 trial_seed: int, order_seed: int, out: Path | None = None):
    """Train ``trials`` networks per ladder size on shuffled prefixes.

    Returns a list of rows ``{k, trial, seed, rmse, steps, epochs, stop, model}``.
    """
    order = shuffled_order(len(train_set), order_seed)
    rows = []
    for k in k_values:
        if k > len(train_set):
            raise ValueError(f"ladder size {k} exceeds the {len(train_set)} training rows")
        sub = train_set.subset(order[:k])
        for r in range(trials):
            seed = trial_seed + r
            cfg = TrainConfig.from_dict(dict(train_cfg.to_dict(), seed=seed))
            model, rep = train(sub, val_set, cfg)
            row = {"k": k, "trial": r, "seed": seed, "rmse": rep.best_val_rmse,
                   "steps": rep.steps, "epochs": len(rep.val_mse), "stop": rep.stop_reason,
                   "wall_s": rep.wall_time, "model": model}
            log.info("k=%d trial=%d rmse=%.6g (%s, %.1fs)", k, r, row["rmse"], rep.stop_reason,
                     rep.wall_time)
            if out is not None:
                stem = f"model_k{k}_t{r}"
                model.save(out / f"{stem}.bin")
                rep.to_csv(out / f"{stem}_history.csv")
                row["file"] = f"{stem}.bin"
            rows.append(row)
    return rows


def summarise_ladder(rows) -> list:
    out = []
    for k in sorted({r["k"] for r in rows}):
        vals = [r["rmse"] for r in rows if r["k"] == k]
        mean, half = t_confidence(vals)
        out.append({"k": k, "trials": len(vals), "mean_rmse": mean, "ci95_half_width": half})
    return out


def run_train(cfg: ExperimentConfig, train_path, val_path, out: Path | None = None,
              figures: bool = True) -> dict:
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, va = ds.TrainingSet.load(train_path), ds.TrainingSet.load(val_path)
    if tr.d != va.d or tr.n_times != va.n_times:
        raise ConfigError("training and validation sets have incompatible dimensions")
    ks = ladder_sizes(int(cfg.raw["ladder_min"]), len(tr))
    rows = train_trials(tr, va, cfg.train_cfg, ks, int(cfg.raw["trials"]), cfg.seeds["trial"],
                        cfg.seeds["train"], out)
    with open(out / "trials.csv", "w") as fh:
        fh.write("k,trial,seed,rmse,steps,epochs,stop,file\n")
        for r in rows:
            fh.write(f"{r['k']},{r['trial']},{r['seed']},{r['rmse']:.17g},{r['steps']},"
                     f"{r['epochs']},{r['stop']},{r['file']}\n")
    summary = summarise_ladder(rows)
    with open(out / "ladder.csv", "w") as fh:
        fh.write("k,trials,mean_rmse,ci95_half_width\n")
        for s in summary:
            fh.write(f"{s['k']},{s['trials']},{s['mean_rmse']:.17g},{s['ci95_half_width']:.17g}\n")
    result = {"ladder": summary,
              "slope": loglog_slope([s["k"] for s in summary], [s["mean_rmse"] for s in summary])
              if len(summary) > 1 else None}
    if figures and len(summary) > 1:
        from . import plotting
        result["figure"] = plotting.convergence(
            out / "convergence.png", [s["k"] for s in summary], [s["mean_rmse"] for s in summary],
            [s["ci95_half_width"] for s in summary] if int(cfg.raw["trials"]) > 1 else None)
    _write_json(out / "train_summary.json", result)
    _write_json(out / "timings_train.json", {f"{r['file']}": r["wall_s"] for r in rows})
    return result


# ---------------------------------------------------------------------------
# report


def highest_variance_index(labels) -> int:
    """Monitoring index with the largest cross-sectional DIM variance."""
    return int(np.argmax(np.var(np.asarray(labels), axis=0)))


def stress_states(setting: ds.Setting, a_values, sigma_values, fixed: dict) -> np.ndarray:
    """Market states over an ``a x sigma`` grid with the other variables pinned."""
    rows = []
    for a in a_values:
        for s in sigma_values:
            vals = dict(fixed, a=a, sigma=s)
            missing = set(setting.names) - set(vals)
            if missing:
                raise ConfigError(f"stress grid lacks values for {sorted(missing)}")
            rows.append([vals[n] for n in setting.names])
    return np.array(rows, dtype=float)


def report_metrics(model: MlpModel, val_set, grid: SimulationGrid, funding: FundingParams,
                   t_gamma_index: int | None = None, predictions=None) -> dict:
    """Global RMSE, per-variable errors at t_gamma and per-state MVA errors."""
    pred = forward(model, val_set.states).astype(float) if predictions is None else np.asarray(predictions)
    truth = val_set.labels
    err = pred - truth
    ig = highest_variance_index(truth) if t_gamma_index is None else int(t_gamma_index)
    mva_true = mva_quadrature(truth, grid, funding)
    mva_pred = mva_quadrature(pred, grid, funding)
    return {"rmse": float(np.sqrt(np.mean(err ** 2))), "t_gamma_index": ig,
            "t_gamma": float(grid.times[ig]), "errors_at_t_gamma": err[:, ig],
            "predictions": pred, "mva_true": np.atleast_1d(mva_true),
            "mva_pred": np.atleast_1d(mva_pred),
            "mva_rel_error": np.atleast_1d(relative_errors(mva_pred, mva_true))}


def write_dim_csvs(folder: Path, times, pred, truth, stderr=None) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(len(truth)):
        DimTrajectory(times, pred[i]).to_csv(folder / f"pred_{i:04d}.csv")
        err = stderr[i] if stderr is not None else np.zeros_like(truth[i])
        DimTrajectory(times, truth[i], err).to_csv(folder / f"truth_{i:04d}.csv")


def run_report(cfg: ExperimentConfig, model_paths, val_path, out: Path | None = None,
               stress_paths: int | None = None, figures: bool = True) -> dict:
    out = Path(out or cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    va = ds.TrainingSet.load(val_path)
    grid = SimulationGrid(va.metadata["grid"]["n_times"], va.metadata["grid"]["t_final"])
    tg = cfg.raw["t_gamma"]
    tg_index = None if tg is None else int(np.argmin(np.abs(grid.times - float(tg))))
    names = va.metadata.get("names") or [f"x{j}" for j in range(va.d)]
    summary = {"models": []}
    for path in model_paths:
        model = MlpModel.load(path)
        m = report_metrics(model, va, grid, cfg.funding, tg_index)
        stem = Path(path).stem
        with open(out / f"{stem}_errors_by_variable.csv", "w") as fh:
            fh.write(",".join(names) + f",error_at_t{m['t_gamma']:g}\n")
            for s, e in zip(va.states, m["errors_at_t_gamma"]):
                fh.write(",".join(f"{v:.17g}" for v in s) + f",{e:.17g}\n")
        with open(out / f"{stem}_mva.csv", "w") as fh:
            fh.write("state,mva_true,mva_pred,rel_error\n")
            for i, (a, b, c) in enumerate(zip(m["mva_true"], m["mva_pred"], m["mva_rel_error"])):
                fh.write(f"{i},{a:.17g},{b:.17g},{c:.17g}\n")
        write_dim_csvs(out / f"{stem}_dim", grid.times, m["predictions"], va.labels, va.stderr)
        entry = {"model": str(path), "rmse": m["rmse"], "t_gamma": m["t_gamma"],
                 "mva_rel_error_median": float(np.median(m["mva_rel_error"])),
                 "mva_rel_error_max": float(np.max(m["mva_rel_error"]))}
        if figures:
            from . import plotting
            entry["figures"] = plotting.report_figures(out, stem, names, va, m, grid)
        summary["models"].append(entry)

    stress = cfg.raw["stress"]
    if stress and model_paths:
        summary["stress"] = run_stress(cfg, MlpModel.load(model_paths[0]), grid, stress, out,
                                       stress_paths or cfg.sizes["m_val"],
                                       tg_index if tg_index is not None else highest_variance_index(va.labels))
    _write_json(out / "summary.json", summary)
    return summary


def run_stress(cfg: ExperimentConfig, model: MlpModel, grid: SimulationGrid, stress: dict,
               out: Path, n_paths: int, tg_index: int) -> list:
    """Relative DIM errors at t_gamma and 2 t_gamma over an ``a x sigma`` grid."""
    states = stress_states(cfg.setting, stress["a"], stress["sigma"], stress.get("fixed", {}))
    truth, err = ds.reference_labels(cfg.setting, states, cfg.templates, grid, n_paths,
                                     cfg.seeds["stress"], cfg.simm, cfg.workers)
    pred = forward(model, states).astype(float)
    i2 = min(2 * (tg_index + 1) - 1, grid.n_times - 1)
    rows = []
    with open(out / "stress_grid.csv", "w") as fh:
        fh.write(f"a,sigma,rel_error_t{grid.times[tg_index]:g},rel_error_t{grid.times[i2]:g}\n")
        for s, p, t in zip(states, pred, truth):
            r1 = float(relative_errors(p[tg_index], t[tg_index]))
            r2 = float(relative_errors(p[i2], t[i2]))
            a, sig = s[cfg.setting.names.index("a")], s[cfg.setting.names.index("sigma")]
            fh.write(f"{a:.17g},{sig:.17g},{r1:.17g},{r2:.17g}\n")
            rows.append({"a": a, "sigma": sig, "rel_t_gamma": r1, "rel_2t_gamma": r2})
    write_dim_csvs(out / "stress_dim", grid.times, pred, truth, err)
    return rows
