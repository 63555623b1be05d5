"""Experiment orchestration: base training, rho grid search, the selection
rules, multi-seed repair runs, and report emission."""

from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import metrics as M
from . import repair as R
from . import stats as S
from .layers import Model, TrainConfig, mlp
from .repair import RepairConfig, postprocess_wos

DEFAULT_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
WOS_EXTENDED = (0.01, 0.001, 0.0001)


def wr_threads() -> int:
    env = os.environ.get("WR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map_jobs(fn, items):
    workers = min(wr_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class SelectionPolicy:
    lambda1: float = 0.25   # required error reduction, fraction of baseline error
    lambda2: float = 0.01   # tolerated accuracy loss, fraction of baseline accuracy

    def __post_init__(self):
        if not 0.0 < self.lambda1 < 1.0:
            raise ValueError("lambda1 must be in (0,1)")
        if not 0.0 <= self.lambda2 < 1.0:
            raise ValueError("lambda2 must be in [0,1)")


@dataclass
class GridCell:
    rho: float
    accuracy: float | None = None
    error: float | None = None
    failure: str | None = None


@dataclass
class GridResult:
    method: str
    cells: list[GridCell] = field(default_factory=list)
    selected: list[tuple[float, str]] = field(default_factory=list)  # (rho, reason)


PRIMARY = "primary"
SECONDARY = "secondary"


def select_hyperparameters(grid: GridResult, orig: dict,
                           policy: SelectionPolicy) -> list[tuple[float, str]]:
    """Pick rho(s) from grid cells against the original model's metrics.

    Rule order: (1) best accuracy among cells cutting error by >= lambda1;
    (2) else among cells not increasing error; (3) else global accuracy
    argmax. A cell strictly better than orig on both axes is additionally
    selected as secondary when the primary pick is not.
    """
    cells = [c for c in grid.cells if c.failure is None]
    if not cells:
        return []
    key = lambda c: (-c.accuracy, c.error, c.rho)
    cut = (1.0 - policy.lambda1) * orig["error"]
    tier1 = [c for c in cells if c.error <= cut]
    tier2 = [c for c in cells if c.error <= orig["error"]]
    pool = tier1 or tier2 or cells
    primary = min(pool, key=key)
    selected = [(primary.rho, PRIMARY)]
    dominant = lambda c: c.accuracy > orig["accuracy"] and c.error < orig["error"]
    if not dominant(primary):
        winners = [c for c in cells if dominant(c)]
        if winners:
            selected.append((min(winners, key=key).rho, SECONDARY))
    return selected


def evaluate_model(model: Model, ds: D.LabeledDataset, target: D.TargetSpec,
                   wos_rho: float | None = None) -> dict:
    preds = M.predict(model, ds)
    if wos_rho is not None:
        preds = postprocess_wos(preds, target, wos_rho)
    return {"accuracy": M.overall_quality(preds), "error": M.target_error(preds, target)}


def grid_search(method: str, base_model: Model, train_ds: D.LabeledDataset,
                test_ds: D.LabeledDataset, target: D.TargetSpec,
                policy: SelectionPolicy, train_cfg: TrainConfig,
                grid=DEFAULT_GRID, orig_ft_error: float | None = None) -> GridResult:
    """One run per rho; w-os extends the grid downward while 0.1 fails to cut
    the orig-ft error by at least lambda1."""
    result = GridResult(method=method)

    def run_cell(rho: float) -> GridCell:
        try:
            if method == "w-os":
                metrics = evaluate_model(base_model, test_ds, target, wos_rho=rho)
            else:
                cfg = RepairConfig(method=method, rho=rho, target=target, train=train_cfg)
                outcome = R.run_repair(base_model, train_ds, cfg)
                metrics = evaluate_model(outcome.model, test_ds, target)
            return GridCell(rho=rho, **metrics)
        except Exception as exc:  # a failed cell is recorded, not fatal
            return GridCell(rho=rho, failure=f"{type(exc).__name__}: {exc}")

    result.cells = _map_jobs(run_cell, list(grid))
    if method == "w-os":
        if orig_ft_error is None:
            raise ValueError("w-os grid search needs the orig-ft error")
        need = (1.0 - policy.lambda1) * orig_ft_error

        def achieves(rho):
            cell = next(c for c in result.cells if c.rho == rho)
            return cell.failure is None and cell.error <= need

        if not achieves(0.1):
            for rho in WOS_EXTENDED:
                result.cells.append(run_cell(rho))
                if achieves(rho):
                    break
    orig_metrics = evaluate_model(base_model, test_ds, target)
    result.selected = select_hyperparameters(result, orig_metrics, policy)
    return result


@dataclass
class ComparisonReport:
    rows: list[dict]
    metadata: dict
    runs: dict            # label -> {"accuracy": [...], "error": [...]}
    confusions: dict      # label -> ConfusionMatrix (single-label only)
    failures: list[dict] = field(default_factory=list)


def build_dataset(spec: dict) -> D.LabeledDataset:
    kind = spec.get("kind")
    params = spec.get("params", {})
    if kind == "toy2d":
        return D.gen_toy2d(**params)
    if kind == "multilabel":
        p = dict(params)
        if "pair_cooccur" in p:
            p["pair_cooccur"] = tuple(p["pair_cooccur"])
        return D.gen_multilabel(**p)
    if kind == "csv":
        return D.load_csv(spec["path"])
    if kind == "idx":
        return D.load_idx(spec["images_path"], spec["labels_path"])
    raise ValueError(f"unknown dataset kind {kind!r}")


def train_base_model(train_ds: D.LabeledDataset, model_spec: dict,
                     train_cfg: TrainConfig, seed: int) -> Model:
    model = mlp(train_ds.d, list(model_spec.get("hidden_dims", [16])),
                train_ds.num_classes, batchnorm=model_spec.get("bn", True),
                task=train_ds.task, seed=seed)
    cfg = RepairConfig(method="orig-ft", rho=1.0, target=None,
                       train=_with_seed(train_cfg, seed))
    R.finetune_orig(model, train_ds, cfg)
    return model


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       momentum=cfg.momentum, seed=seed, milestones=cfg.milestones)


def _with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       momentum=cfg.momentum, seed=cfg.seed, milestones=cfg.milestones)


def run_repair_experiment(config: dict) -> ComparisonReport:
    """Full protocol: per-seed base training, grid selection, 5-seed repair
    runs, rank table, and gated significance tests against orig-ft."""
    ds = build_dataset(config["dataset"])
    target = config["target"]
    if isinstance(target, str):
        target = D.TargetSpec.parse(target, ds.class_names)
    train_ds, test_ds = D.dataset_split(ds, config.get("test_fraction", 0.5),
                                        config.get("split_seed", 0))
    tr = config.get("train", {})
    base_cfg = TrainConfig(epochs=tr.get("epochs", 100),
                           batch_size=tr.get("batch_size", 32),
                           lr=tr.get("lr", 0.1), momentum=tr.get("momentum", 0.9))
    ft_cfg = _with_epochs(base_cfg, tr.get("finetune_epochs", 20))
    model_spec = config.get("model", {"hidden_dims": [16], "bn": True})
    seeds = list(config.get("seeds", range(5)))
    methods = list(config.get("methods", R.ALL_METHODS[1:] + ("orig-ft",)))
    policy = config.get("policy", SelectionPolicy())
    if isinstance(policy, dict):
        policy = SelectionPolicy(**policy)
    grid = tuple(config.get("grid", DEFAULT_GRID))

    base_models = {s: train_base_model(train_ds, model_spec, base_cfg, s)
                   for s in seeds}
    orig_eval = {s: evaluate_model(base_models[s], test_ds, target) for s in seeds}

    # orig-ft per seed (always needed: baseline and significance reference)
    def ft_seed(s):
        cfg = RepairConfig(method="orig-ft", rho=1.0, target=None,
                           train=_with_seed(ft_cfg, s))
        return R.run_repair(base_models[s], train_ds, cfg)

    orig_ft_models = dict(zip(seeds, _map_jobs(ft_seed, seeds)))
    orig_ft_eval = {s: evaluate_model(orig_ft_models[s].model, test_ds, target)
                    for s in seeds}
    orig_ft_err_mean = float(np.mean([e["error"] for e in orig_ft_eval.values()]))

    grid_results: dict[str, GridResult] = {}
    repair_methods = [m for m in methods if m != "orig-ft"]
    grid_seed = seeds[0]
    for method in repair_methods:
        grid_results[method] = grid_search(
            method, base_models[grid_seed], train_ds, test_ds, target, policy,
            _with_seed(ft_cfg, grid_seed), grid=grid,
            orig_ft_error=orig_ft_eval[grid_seed]["error"])

    runs = {
        "orig": {"accuracy": [orig_eval[s]["accuracy"] for s in seeds],
                 "error": [orig_eval[s]["error"] for s in seeds]},
        "orig-ft": {"accuracy": [orig_ft_eval[s]["accuracy"] for s in seeds],
                    "error": [orig_ft_eval[s]["error"] for s in seeds]},
    }
    row_info = {"orig": ("orig", None), "orig-ft": ("orig-ft", None)}
    failures = []
    repaired_models = {}  # label -> {seed: Model} for confusion emission

    for method in repair_methods:
        for rho, reason in grid_results[method].selected:
            label = f"{method}({rho:g})"

            def run_seed(s, method=method, rho=rho):
                if method == "w-os":
                    ev = evaluate_model(base_models[s], test_ds, target, wos_rho=rho)
                    return ev, base_models[s], rho
                cfg = RepairConfig(method=method, rho=rho, target=target,
                                   train=_with_seed(ft_cfg, s))
                outcome = R.run_repair(base_models[s], train_ds, cfg)
                return evaluate_model(outcome.model, test_ds, target), outcome.model, None

            try:
                results = _map_jobs(run_seed, seeds)
            except Exception as exc:
                failures.append({"label": label, "reason": f"{type(exc).__name__}: {exc}"})
                continue
            runs[label] = {"accuracy": [r[0]["accuracy"] for r in results],
                           "error": [r[0]["error"] for r in results]}
            row_info[label] = (method, rho)
            repaired_models[label] = {s: (r[1], r[2]) for s, r in zip(seeds, results)}

    table_rows = [{"label": lbl, "method": row_info[lbl][0], "rho": row_info[lbl][1],
                   "accuracy": float(np.mean(vals["accuracy"])),
                   "accuracy_sd": float(np.std(vals["accuracy"], ddof=1)) if len(seeds) > 1 else 0.0,
                   "error": float(np.mean(vals["error"])),
                   "error_sd": float(np.std(vals["error"], ddof=1)) if len(seeds) > 1 else 0.0}
                  for lbl, vals in runs.items()]
    table_rows = S.rank_sum_table(table_rows)

    sig = S.significance_protocol(
        {lbl: v for lbl, v in runs.items() if lbl not in ("orig", "orig-ft")},
        runs["orig-ft"])
    for row in table_rows:
        entry = sig.get(row["label"])
        row.update(acc_W_p=None, acc_VD_A=None, acc_VD_mag=None,
                   err_W_p=None, err_VD_A=None, err_VD_mag=None)
        if entry:
            if entry["err_test"] is not None:
                row["err_W_p"] = entry["err_test"].p
                row["err_VD_A"] = entry["err_effect"].A
                row["err_VD_mag"] = entry["err_effect"].magnitude
            if entry["acc_test"] is not None:
                row["acc_W_p"] = entry["acc_test"].p
                row["acc_VD_A"] = entry["acc_effect"].A
                row["acc_VD_mag"] = entry["acc_effect"].magnitude

    confusions = {}
    if ds.task == D.SINGLE_LABEL:
        s0 = seeds[0]
        confusions["orig"] = M.confusion_matrix(
            M.predict(base_models[s0], test_ds), ds.class_names)
        confusions["orig-ft"] = M.confusion_matrix(
            M.predict(orig_ft_models[s0].model, test_ds), ds.class_names)
        for label, per_seed in repaired_models.items():
            model, wos_rho = per_seed[s0]
            preds = M.predict(model, test_ds)
            if wos_rho is not None:
                preds = postprocess_wos(preds, target, wos_rho)
            confusions[label] = M.confusion_matrix(preds, ds.class_names)

    metadata = {"dataset": config["dataset"], "model": model_spec,
                "target": str(target), "target_kind": target.kind,
                "task": ds.task, "seeds": seeds,
                "policy": {"lambda1": policy.lambda1, "lambda2": policy.lambda2},
                "grid": {m: [(c.rho, c.accuracy, c.error, c.failure)
                             for c in g.cells] for m, g in grid_results.items()},
                "selected": {m: g.selected for m, g in grid_results.items()},
                "class_names": ds.class_names}
    return ComparisonReport(rows=table_rows, metadata=metadata, runs=runs,
                            confusions=confusions, failures=failures)


REPORT_COLUMNS = ("method", "rho", "accuracy_mean", "accuracy_sd", "error_mean",
                  "error_sd", "acc_rank", "err_rank", "rank_sum", "acc_W_p",
                  "acc_VD_A", "acc_VD_mag", "err_W_p", "err_VD_A", "err_VD_mag")


def atomic_write(path, text: str, mode="w") -> None:
    """Write via temp-then-rename so interrupted runs never leave partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-wrepair-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: ComparisonReport, out_dir, formats=("csv", "json")) -> list[str]:
    """Write the methods table, per-method confusion CSVs, the target-class
    confusion histogram CSV, and a manifest. Returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def row_values(row):
        return {"method": row["label"], "rho": row["rho"],
                "accuracy_mean": row["accuracy"], "accuracy_sd": row["accuracy_sd"],
                "error_mean": row["error"], "error_sd": row["error_sd"],
                "acc_rank": row["acc_rank"], "err_rank": row["err_rank"],
                "rank_sum": row["rank_sum"], "acc_W_p": row["acc_W_p"],
                "acc_VD_A": row["acc_VD_A"], "acc_VD_mag": row["acc_VD_mag"],
                "err_W_p": row["err_W_p"], "err_VD_A": row["err_VD_A"],
                "err_VD_mag": row["err_VD_mag"]}

    if "csv" in formats:
        lines = [",".join(REPORT_COLUMNS)]
        for row in report.rows:
            vals = row_values(row)
            lines.append(",".join(_fmt(vals[c]) for c in REPORT_COLUMNS))
        path = os.path.join(out_dir, "methods.csv")
        atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    if "json" in formats:
        payload = {"metadata": report.metadata,
                   "rows": [row_values(r) for r in report.rows],
                   "runs": report.runs, "failures": report.failures}
        path = os.path.join(out_dir, "report.json")
        atomic_write(path, json.dumps(payload, indent=2, default=str))
        written.append(path)

    target_classes = sorted(
        {int(i) for g in D.TargetSpec.parse(report.metadata["target"]).groups for i in g})
    if report.confusions:
        before = report.confusions.get("orig")
        for label, cm in report.confusions.items():
            safe = label.replace("(", "_").replace(")", "").replace(".", "p")
            path = os.path.join(out_dir, f"confusion_{safe}.csv")
            names = cm.class_names or [str(k) for k in range(cm.matrix.shape[0])]
            lines = ["," + ",".join(names)]
            for name, mrow in zip(names, cm.matrix):
                lines.append(name + "," + ",".join(repr(float(v)) for v in mrow))
            atomic_write(path, "\n".join(lines) + "\n")
            written.append(path)
        # per-target-class confusion to every other class, before vs after
        hist_lines = ["method,from_class,to_class,before,after"]
        c = before.matrix.shape[0]
        for label, cm in report.confusions.items():
            if label == "orig":
                continue
            for t in target_classes:
                for j in range(c):
                    if j == t:
                        continue
                    hist_lines.append(
                        f"{label},{t},{j},{before.matrix[t, j]!r},{cm.matrix[t, j]!r}")
        path = os.path.join(out_dir, "confusion_histogram.csv")
        atomic_write(path, "\n".join(hist_lines) + "\n")
        written.append(path)

    manifest = {"outputs": [os.path.basename(p) for p in written],
                "metadata": report.metadata}
    mpath = os.path.join(out_dir, "manifest.json")
    atomic_write(mpath, json.dumps(manifest, indent=2, default=str))
    written.append(mpath)
    return written
