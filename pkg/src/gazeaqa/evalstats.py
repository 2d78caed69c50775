"""Evaluation metrics, bootstrap intervals, paired tests and report emission.

Bootstrap resample ``b`` under seed ``s`` always draws from a Philox
generator keyed by ``SeedSequence([s, b])``, so results are identical
whether resamples are computed serially or in any parallel order.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

METRICS = ("plcc", "srocc", "mse")
LOWER_IS_BETTER = {"mse"}

SUBSET_NOTE = ("Lowest-error subsets rank samples by each evaluated model's own |pred - score| "
               "unless a reference model is named.")


class UndefinedCorrelationError(ValueError):
    """Correlation requested on an input with zero variance."""


@dataclass(frozen=True)
class PredictionSet:
    ids: tuple[str, ...]
    pred: np.ndarray
    score: np.ndarray
    category: tuple[str, ...] = ()

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        pred = np.asarray(self.pred, dtype=np.float64).ravel()
        score = np.asarray(self.score, dtype=np.float64).ravel()
        cat = tuple(self.category) or ("",) * len(ids)
        if not (len(ids) == pred.size == score.size == len(cat)):
            raise ValueError("prediction set fields have different lengths")
        if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(score))):
            raise ValueError("prediction set contains non-finite values")
        if len(set(ids)) != len(ids):
            raise ValueError("prediction set has duplicate ids")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "category", cat)

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "PredictionSet":
        idx = list(idx)
        return PredictionSet(tuple(self.ids[i] for i in idx), self.pred[idx], self.score[idx],
                             tuple(self.category[i] for i in idx))

    def select_ids(self, ids) -> "PredictionSet":
        pos = {k: i for i, k in enumerate(self.ids)}
        return self.take(pos[k] for k in ids)

    def aligned_to(self, other: "PredictionSet") -> "PredictionSet":
        if set(self.ids) != set(other.ids):
            raise ValueError("prediction sets cover different ids")
        return self.select_ids(other.ids)


def load_predictions(path) -> PredictionSet:
    ids, pred, score, cat = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                pred.append(float(obj["pred"]))
                score.append(float(obj["score"]))
                cat.append(str(obj.get("category", "")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    return PredictionSet(tuple(ids), np.array(pred), np.array(score), tuple(cat))


def write_predictions(path, p: PredictionSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, a, y, c in zip(p.ids, p.pred, p.score, p.category):
            fh.write(json.dumps({"id": i, "pred": float(a), "score": float(y), "category": c}) + "\n")


# ---------------------------------------------------------------------------
# point metrics


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        raise UndefinedCorrelationError("correlation needs at least 2 samples")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float(da @ db) / math.sqrt(saa * sbb)


def _values(p):
    if isinstance(p, PredictionSet):
        return p.pred, p.score
    pred, score = p
    return np.asarray(pred, dtype=np.float64), np.asarray(score, dtype=np.float64)


def plcc(p) -> float:
    return pearson(*_values(p))


def srocc(p) -> float:
    pred, score = _values(p)
    return pearson(stats.rankdata(pred), stats.rankdata(score))


def mse(p) -> float:
    pred, score = _values(p)
    if pred.size < 1:
        raise ValueError("mse needs at least 1 sample")
    r = pred - score
    return float(np.mean(r * r))


METRIC_FUNCS: dict[str, Callable] = {"plcc": plcc, "srocc": srocc, "mse": mse}


def fisher_ci(r: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """Analytic Fisher-z interval for a Pearson correlation (cross-check only)."""
    if n <= 3:
        raise ValueError("Fisher z interval needs n > 3")
    z = math.atanh(max(min(r, 1 - 1e-15), -1 + 1e-15))
    half = stats.norm.ppf(0.5 + level / 2) / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


# vectorized metric over a (B, n) matrix of resampled values

def _rows_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    saa = np.einsum("ij,ij->i", da, da)
    sbb = np.einsum("ij,ij->i", db, db)
    num = np.einsum("ij,ij->i", da, db)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / np.sqrt(saa * sbb)


def _rows_metric(metric: str, pred: np.ndarray, score: np.ndarray) -> np.ndarray:
    if metric == "plcc":
        return _rows_pearson(pred, score)
    if metric == "srocc":
        return _rows_pearson(stats.rankdata(pred, axis=1), stats.rankdata(score, axis=1))
    if metric == "mse":
        return np.mean((pred - score) ** 2, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def _degenerate_rows(metric: str, arrays: Sequence[np.ndarray]) -> np.ndarray:
    if metric not in ("plcc", "srocc"):
        return np.zeros(arrays[0].shape[0], dtype=bool)
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        bad |= np.all(a == a[:, :1], axis=1)
    return bad


def resample_indices(n: int, B: int, seed: int, check: Callable[[np.ndarray], np.ndarray] | None = None,
                     max_redraws: int = 1000) -> tuple[np.ndarray, int]:
    """``(B, n)`` bootstrap index matrix and the number of redrawn resamples.

    Row ``b`` comes from the generator keyed by ``(seed, b)``; when ``check``
    flags a row as degenerate that generator draws again.
    """
    idx = np.empty((B, n), dtype=np.int64)
    gens = []
    for b in range(B):
        g = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), b])))
        idx[b] = g.integers(0, n, size=n)
        gens.append(g)
    redraws = 0
    if check is not None:
        for _ in range(max_redraws):
            bad = np.flatnonzero(check(idx))
            if bad.size == 0:
                break
            for b in bad:
                idx[b] = gens[b].integers(0, n, size=n)
            redraws += bad.size
        else:
            raise UndefinedCorrelationError("could not draw non-degenerate bootstrap resamples")
    return idx, redraws


@dataclass(frozen=True)
class MetricReport:
    metric: str
    estimate: float
    ci_low: float
    ci_high: float
    n: int
    resamples: int
    seed: int
    redraws: int = 0

    @property
    def ci_contains_estimate(self) -> bool:
        return self.ci_low <= self.estimate <= self.ci_high


def bootstrap_ci(p: PredictionSet, metric: str = "plcc", B: int = 1000, seed: int = 0,
                 level: float = 0.95) -> MetricReport:
    """Percentile bootstrap interval for ``metric``."""
    if len(p) < 2:
        raise ValueError("bootstrap needs n >= 2")
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    estimate = METRIC_FUNCS[metric](p)
    pred, score = p.pred, p.score
    idx, redraws = resample_indices(len(p), B, seed,
                                    lambda ix: _degenerate_rows(metric, (pred[ix], score[ix])))
    vals = _rows_metric(metric, pred[idx], score[idx])
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(vals, [tail, 100.0 - tail])
    if vals.min() == vals.max():
        lo = hi = float(vals[0])
    rep = MetricReport(metric, float(estimate), float(lo), float(hi), len(p), B, seed, redraws)
    if not rep.ci_contains_estimate:
        warnings.warn(f"{metric} estimate {estimate:.4f} outside its bootstrap interval [{lo:.4f}, {hi:.4f}]",
                      stacklevel=2)
    return rep


@dataclass(frozen=True)
class PairedTestResult:
    metric: str
    delta: float
    p_value: float
    resamples: int
    seed: int


def paired_test(p_a: PredictionSet, p_b: PredictionSet, metric: str = "plcc", B: int = 1000,
                seed: int = 0) -> PairedTestResult:
    """Two-sided paired bootstrap test of ``metric(A) - metric(B)``.

    Both models are scored on the same resampled indices;
    ``p = 2 min(#(d <= 0) + 1, #(d >= 0) + 1) / (B + 1)``, capped at 1.
    """
    if set(p_a.ids) != set(p_b.ids):
        raise ValueError("paired test needs identical id sets")
    p_b = p_b.aligned_to(p_a)
    if not np.array_equal(p_a.score, p_b.score):
        raise ValueError("paired prediction sets disagree on ground-truth scores")
    f = METRIC_FUNCS[metric]
    delta = f(p_a) - f(p_b)
    pa, pb, y = p_a.pred, p_b.pred, p_a.score
    idx, _ = resample_indices(len(p_a), B, seed,
                              lambda ix: _degenerate_rows(metric, (pa[ix], pb[ix], y[ix])))
    d = _rows_metric(metric, pa[idx], y[idx]) - _rows_metric(metric, pb[idx], y[idx])
    lo = int(np.sum(d <= 0)) + 1
    hi = int(np.sum(d >= 0)) + 1
    p = min(1.0, 2.0 * min(lo, hi) / (B + 1))
    return PairedTestResult(metric, float(delta), p, B, seed)


def lowest_error_subset(p: PredictionSet, k: int, reference: PredictionSet | None = None) -> PredictionSet:
    """The ``k`` samples with the smallest absolute error, ties broken by id.

    Errors come from ``reference`` when given, else from ``p`` itself.  The
    result keeps ``p``'s ordering.
    """
    if k > len(p):
        raise ValueError(f"k={k} exceeds set size {len(p)}")
    src = (reference.aligned_to(p) if reference is not None else p)
    err = np.abs(src.pred - src.score)
    order = sorted(range(len(p)), key=lambda i: (err[i], p.ids[i]))
    keep = set(order[:k])
    return p.take(i for i in range(len(p)) if i in keep)


def subset_size(spec: str, n: int) -> int:
    """Parse ``'0.5'`` (fraction) or ``'100'`` (count) into a sample count."""
    val = float(spec)
    if 0 < val <= 1 and ("." in spec or val < 1):
        return max(1, int(round(val * n)))
    return int(val)


# ---------------------------------------------------------------------------
# tables


@dataclass
class ReportRow:
    group: str
    model: str
    n: int
    reports: dict[str, MetricReport]
    p_values: dict[str, float] = field(default_factory=dict)


def model_rows(models: Mapping[str, PredictionSet], reference: str | None = None, group: str = "all",
               metrics: Sequence[str] = METRICS, B: int = 1000, seed: int = 0) -> list[ReportRow]:
    """One row per model with bootstrap intervals and (optionally) paired p-values vs ``reference``."""
    rows = []
    for name, p in models.items():
        reports = {m: bootstrap_ci(p, m, B, seed) for m in metrics}
        pv = {}
        if reference is not None and name != reference:
            ref = models[reference]
            pv = {m: paired_test(p.aligned_to(ref), ref, m, B, seed).p_value for m in metrics}
        rows.append(ReportRow(group, name, len(p), reports, pv))
    return rows


def category_report(models: Mapping[str, PredictionSet], reference: str | None = None,
                    metrics: Sequence[str] = METRICS, B: int = 1000, seed: int = 0) -> list[ReportRow]:
    """Per-category rows; categories with fewer than 2 samples are skipped with a warning."""
    if not models:
        return []
    first = next(iter(models.values()))
    cats = sorted(set(first.category))
    rows = []
    for c in cats:
        ids = [i for i, cc in zip(first.ids, first.category) if cc == c]
        if len(ids) < 2:
            warnings.warn(f"category {c!r} has n={len(ids)} < 2; excluded", stacklevel=2)
            continue
        sub = {name: p.select_ids(ids) for name, p in models.items()}
        rows.extend(model_rows(sub, reference, c, metrics, B, seed))
    return rows


def _stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "*"
    if p < 0.01:
        return "**"
    return ""


def format_cell(rep: MetricReport, p: float | None = None) -> str:
    return f"{rep.estimate:.3f}{_stars(p)} [{rep.ci_low:.3f}, {rep.ci_high:.3f}]"


def render_table(rows: Sequence[ReportRow], metrics: Sequence[str] = METRICS, title: str | None = None) -> str:
    header = ["Model"] + [f"{m.upper()} [95% CI]" for m in metrics]
    grouped = any(r.group != "all" for r in rows)
    if grouped:
        header = ["Group (N)"] + header
    lines = []
    if title:
        lines.append(title)
    lines.append(" | ".join(header))
    lines.append("-" * len(lines[-1]))
    for r in rows:
        cells = [r.model] + [format_cell(r.reports[m], r.p_values.get(m)) for m in metrics]
        if grouped:
            cells = [f"{r.group} (N={r.n})"] + cells
        lines.append(" | ".join(cells))
    lines.append("")
    lines.append("* indicates p < .001, ** indicates p < .01 vs. the reference model (paired bootstrap).")
    lines.append(SUBSET_NOTE)
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[ReportRow], metrics: Sequence[str] = METRICS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["group", "model", "n"]
    for m in metrics:
        head += [m, f"{m}_ci_low", f"{m}_ci_high", f"{m}_p_value"]
    w.writerow(head)
    for r in rows:
        line = [r.group, r.model, r.n]
        for m in metrics:
            rep = r.reports[m]
            pv = r.p_values.get(m)
            line += [repr(rep.estimate), repr(rep.ci_low), repr(rep.ci_high), "" if pv is None else repr(pv)]
        w.writerow(line)
    return buf.getvalue()


def emit_report(rows: Sequence[ReportRow], out_prefix, metrics: Sequence[str] = METRICS,
                title: str | None = None) -> list[Path]:
    """Write ``<prefix>.txt`` and ``<prefix>.csv``."""
    prefix = Path(out_prefix)
    txt, csv_path = prefix.with_suffix(".txt"), prefix.with_suffix(".csv")
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        txt.write_text(render_table(rows, metrics, title), encoding="utf-8")
        csv_path.write_text(render_csv(rows, metrics), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not write report {prefix}: {exc}") from exc
    return [txt, csv_path]


def emit_scatter(models: Mapping[str, PredictionSet], out_path, bins: int = 60,
                 limits: tuple[float, float] = (1.0, 10.0)) -> Path:
    """Side-by-side prediction-vs-truth density panels with the ``y = x`` line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(models)
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(4 * max(len(names), 1), 4), squeeze=False)
    edges = np.linspace(limits[0], limits[1], bins + 1)
    for ax, name in zip(axes[0], names):
        p = models[name]
        h, _, _ = np.histogram2d(p.score, p.pred, bins=[edges, edges])
        ax.imshow(np.log1p(h.T), origin="lower", extent=(*limits, *limits), cmap="jet", aspect="equal",
                  interpolation="nearest")
        ax.plot(limits, limits, color="white", lw=1.0, ls="--")
        ax.set_xlim(limits)
        ax.set_ylim(limits)
        ax.set_xlabel("ground truth")
        ax.set_ylabel("prediction")
        ax.set_title(name)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, dpi=80, metadata={"Software": None})
    except OSError as exc:
        raise OSError(f"could not write scatter plot {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return out_path
