"""Frozen-backbone linear probing for superpatch-level organ presence."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import ndnum as nd
from .errors import ConfigError, DimensionError, ParameterError
from .model.masking import full_visible
from .model.network import ModelParams, encode
from .superpatch import SuperpatchGrid, partition, partition_array, patchify
from .volume import ORGAN_NAMES, LabelGrid, Volume


@dataclass(frozen=True)
class ProbeConfig:
    threshold: int = 100
    n_organs: int = 8
    fractions: tuple = (0.10, 0.25, 0.50, 1.00)
    epochs: int = 2000
    l2: float = 1e-2
    f1_threshold: float = 0.5
    pool: str = "mean"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.threshold < 1:
            raise ConfigError("voxel threshold must be >= 1")
        if self.n_organs < 1:
            raise ConfigError("n_organs must be >= 1")
        if not self.fractions or any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError(f"label fractions must lie in (0, 1], got {self.fractions}")
        if not 0.0 < self.f1_threshold < 1.0:
            raise ConfigError("f1_threshold must lie in (0, 1)")
        if self.epochs < 1 or self.l2 < 0:
            raise ConfigError("epochs must be >= 1 and l2 >= 0")
        if self.pool not in ("mean", "nt"):
            raise ConfigError(f"pool must be 'mean' or 'nt', got {self.pool!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


@dataclass
class ProbeTable:
    ids: list
    features: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise DimensionError("probe features and targets must be 2-d")
        if not len(self.ids) == self.features.shape[0] == self.targets.shape[0]:
            raise DimensionError("probe ids, features and targets differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DimensionError("probe ids must be unique")

    def __len__(self):
        return len(self.ids)

    def subset(self, rows) -> "ProbeTable":
        rows = np.asarray(rows, dtype=np.intp)
        return ProbeTable([self.ids[i] for i in rows], self.features[rows], self.targets[rows],
                          self.split)

    @staticmethod
    def concat(tables: list["ProbeTable"]) -> "ProbeTable":
        return ProbeTable([i for t in tables for i in t.ids],
                          np.concatenate([t.features for t in tables]),
                          np.concatenate([t.targets for t in tables]), tables[0].split)


# -- labels and features -------------------------------------------------------------


def label_superpatches(labels: LabelGrid, grid: SuperpatchGrid | int, threshold: int = 100,
                       n_organs: int = 8) -> np.ndarray:
    """[N x C] presence bits: organ c present iff it covers >= threshold voxels."""
    side = grid.side if isinstance(grid, SuperpatchGrid) else int(grid)
    if isinstance(grid, SuperpatchGrid) and grid.dims != labels.dims:
        raise DimensionError(f"label grid {labels.dims} vs superpatch grid over {grid.dims}")
    bits = []
    for _, block in partition_array(labels.labels, side):
        counts = np.bincount(block.reshape(-1), minlength=n_organs + 1)[1:n_organs + 1]
        bits.append((counts >= threshold).astype(np.int64))
    return np.array(bits)


def extract_features(v: Volume, params: ModelParams, threads: int = 1,
                     pool: str = "mean") -> np.ndarray:
    """[N x d] pooled encoder outputs per superpatch, clean and unmasked.

    ``pool="mean"`` averages the patch-token rows (NEMESIS tokens excluded);
    ``pool="nt"`` averages the NEMESIS-token rows instead.
    """
    cfg = params.config
    if pool == "nt" and not cfg.nt_tokens:
        raise ConfigError("nt pooling needs nt_tokens > 0")
    SuperpatchGrid(v.dims, cfg.superpatch)
    mask = full_visible(cfg.grid, cfg.axis)
    n = cfg.n_tokens

    def work(item):
        _, sp = item
        with nd.no_grad():
            latent, _ = encode(patchify(sp, cfg.patch), mask, params)
        rows = latent.data[:n] if pool == "mean" else latent.data[n:]
        return rows.astype(np.float64).mean(axis=0)

    items = partition(v, cfg.superpatch)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            feats = list(ex.map(work, items))
    else:
        feats = [work(it) for it in items]
    return np.array(feats)


def build_table(pairs, params: ModelParams, pc: ProbeConfig, split: str, prefix: str | None = None,
                threads: int = 1) -> ProbeTable:
    """Rows for every superpatch of every (normalized volume, labels) pair."""
    prefix = prefix or split
    ids, feats, targets = [], [], []
    side = params.config.superpatch
    for k, (v, lab) in enumerate(pairs):
        grid = SuperpatchGrid(v.dims, side)
        feats.append(extract_features(v, params, threads, pc.pool))
        targets.append(label_superpatches(lab, grid, pc.threshold, pc.n_organs))
        ids += [f"{prefix}{k:03d}_{i}{j}{m}" for i, j, m in grid.indices()]
    return ProbeTable(ids, np.concatenate(feats), np.concatenate(targets), split)


def organ_columns(n_organs: int) -> list[str]:
    return [ORGAN_NAMES[c] if c < len(ORGAN_NAMES) else f"organ_{c + 1}" for c in range(n_organs)]


def write_table(table: ProbeTable, path) -> None:
    d, c = table.features.shape[1], table.targets.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"feat_{i}" for i in range(d)] + organ_columns(c))
        for i, rid in enumerate(table.ids):
            w.writerow([rid] + [repr(float(x)) for x in table.features[i]]
                       + [int(x) for x in table.targets[i]])


def read_table(path, n_organs: int, split: str = "train") -> ProbeTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    feats = np.array([[float(x) for x in r[1:-n_organs]] for r in body])
    targets = np.array([[int(x) for x in r[-n_organs:]] for r in body])
    return ProbeTable(ids, feats, targets, split)


# -- classifier ------------------------------------------------------------------------


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: np.ndarray
    degenerate: np.ndarray
    loss: float = float("nan")

    def scores(self, features: np.ndarray) -> np.ndarray:
        return expit(np.asarray(features, dtype=np.float64) @ self.weights + self.bias)


def _objective(w, b, x, y, l2):
    z = x @ w + b
    # log(1 + e^z) - y z, the per-class mean logistic loss
    nll = (np.logaddexp(0.0, z) - y * z).mean(axis=0)
    return nll + 0.5 * l2 * (w * w).sum(axis=0)


def train_linear(table: ProbeTable, pc: ProbeConfig, epochs: int | None = None) -> LinearProbe:
    """Per-class L2-regularized logistic regression, fit by full-batch Nesterov descent.

    Features are standardized with training statistics; the returned
    weights act on raw features. Classes whose training labels are all equal
    are flagged degenerate and predict their training prevalence.
    """
    if len(table) == 0:
        raise ParameterError("cannot train a probe on an empty table")
    epochs = epochs or pc.epochs
    x_raw, y = table.features, table.targets.astype(np.float64)
    mu = x_raw.mean(axis=0)
    sd = x_raw.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x_raw - mu) / sd
    n, d = x.shape
    c = y.shape[1]
    pos = y.sum(axis=0)
    degenerate = (pos == 0) | (pos == n)

    # Lipschitz constant of the gradient (bias included via a ones column).
    aug = np.hstack([x, np.ones((n, 1))])
    smooth = np.linalg.eigvalsh(aug.T @ aug / n)[-1] / 4.0 + pc.l2
    step = 1.0 / smooth
    ratio = smooth / pc.l2 if pc.l2 > 0 else np.inf
    momentum = (np.sqrt(ratio) - 1.0) / (np.sqrt(ratio) + 1.0) if np.isfinite(ratio) else 0.9

    w = np.zeros((d, c))
    b = np.zeros(c)
    w_prev, b_prev = w.copy(), b.copy()
    for _ in range(epochs):
        wl = w + momentum * (w - w_prev)
        bl = b + momentum * (b - b_prev)
        r = expit(x @ wl + bl) - y
        gw = x.T @ r / n + pc.l2 * wl
        gb = r.mean(axis=0)
        w_prev, b_prev = w, b
        w, b = wl - step * gw, bl - step * gb
    loss = _objective(w, b, x, y, pc.l2)

    prevalence = np.clip(pos / n, 1e-6, 1 - 1e-6)
    w[:, degenerate] = 0.0
    b[degenerate] = np.log(prevalence[degenerate] / (1 - prevalence[degenerate]))
    raw_w = w / sd[:, None]
    raw_b = b - mu @ raw_w
    return LinearProbe(raw_w, raw_b, degenerate, float(loss[~degenerate].mean()) if (~degenerate).any()
                       else float("nan"))


def probe_objective(probe: LinearProbe, table: ProbeTable, pc: ProbeConfig) -> float:
    """Mean regularized training loss over non-degenerate classes, in standardized units."""
    x_raw, y = table.features, table.targets.astype(np.float64)
    mu = x_raw.mean(axis=0)
    sd = x_raw.std(axis=0)
    sd[sd == 0] = 1.0
    w = probe.weights * sd[:, None]
    b = probe.bias + mu @ probe.weights
    loss = _objective(w, b, (x_raw - mu) / sd, y, pc.l2)
    return float(loss[~probe.degenerate].mean())


# -- scores ----------------------------------------------------------------------------


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with midranks for ties; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise DimensionError("auroc: scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(scores: np.ndarray, labels: np.ndarray, exclude=None) -> tuple[float, list]:
    """(mean over defined, non-excluded classes, per-class values with None for undefined)."""
    scores, labels = np.atleast_2d(scores), np.atleast_2d(labels)
    per = [auroc(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    keep = [a for c, a in enumerate(per) if a is not None and not (exclude is not None and exclude[c])]
    return (float(np.mean(keep)) if keep else float("nan")), per


def f1_binary(pred, labels) -> float:
    pred = np.asarray(pred).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def macro_f1(scores, labels, threshold: float = 0.5, exclude=None) -> float:
    """Unweighted mean of per-class F1 with positives predicted at ``score >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"F1 threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per = [f1_binary(scores[:, c] >= threshold, labels[:, c]) for c in range(labels.shape[1])]
    keep = [f for c, f in enumerate(per) if not (exclude is not None and exclude[c])]
    return float(np.mean(keep)) if keep else float("nan")


# -- label-efficiency sweep ----------------------------------------------------------------


def stratified_subset(targets: np.ndarray, fraction: float, seed) -> np.ndarray:
    """Sorted row indices: round(f * n) rows, one positive and one negative per class first."""
    n = targets.shape[0]
    k = max(1, int(np.floor(fraction * n + 0.5)))
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for c in range(targets.shape[1]):
        for want in (1, 0):
            if len(chosen) >= k:
                break
            if (targets[taken, c] == want).any():
                continue
            pool = np.flatnonzero((targets[:, c] == want) & ~taken)
            if pool.size:
                pick = int(rng.choice(pool))
                chosen.append(pick)
                taken[pick] = True
    rest = np.flatnonzero(~taken)
    extra = rng.choice(rest, size=k - len(chosen), replace=False) if k > len(chosen) else []
    return np.sort(np.concatenate([np.array(chosen, dtype=np.intp), np.asarray(extra, dtype=np.intp)]))


@dataclass
class SweepRow:
    fraction: float
    n_train: int
    auroc: float
    macro_f1: float
    excluded: list = field(default_factory=list)


def evaluate(probe: LinearProbe, test: ProbeTable, pc: ProbeConfig) -> tuple[float, float, list]:
    scores = probe.scores(test.features)
    undefined = np.array([auroc(scores[:, c], test.targets[:, c]) is None
                          for c in range(test.targets.shape[1])])
    exclude = probe.degenerate | undefined
    mean_auc, _ = macro_auroc(scores, test.targets, exclude)
    f1 = macro_f1(scores, test.targets, pc.f1_threshold, exclude)
    return mean_auc, f1, [int(c) for c in np.flatnonzero(exclude)]


def label_sweep(train: ProbeTable, test: ProbeTable, pc: ProbeConfig) -> list[SweepRow]:
    """Train on a stratified fraction of the training rows, score on the full test split."""
    rows = []
    for i, f in enumerate(pc.fractions):
        idx = stratified_subset(train.targets, f, np.random.SeedSequence([pc.seed, i]))
        probe = train_linear(train.subset(idx), pc)
        auc, f1, excluded = evaluate(probe, test, pc)
        rows.append(SweepRow(f, int(idx.size), auc, f1, excluded))
    return rows


def _pct(f: float) -> str:
    return f"{f * 100:g}%"


def write_sweep(rows: list[SweepRow], path, n_organs: int = 8, method: str = "linear_probe") -> None:
    """Wide CSV: one row per metric, one column per label fraction."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric"] + [_pct(r.fraction) for r in rows])
        w.writerow([method, "auroc"] + [f"{r.auroc:.6f}" for r in rows])
        w.writerow([method, "macro_f1"] + [f"{r.macro_f1:.6f}" for r in rows])


def write_sweep_long(rows: list[SweepRow], path, n_organs: int = 8) -> None:
    names = organ_columns(n_organs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "n_train", "auroc", "macro_f1", "excluded_classes"])
        for r in rows:
            w.writerow([f"{r.fraction:g}", r.n_train, f"{r.auroc:.6f}", f"{r.macro_f1:.6f}",
                        ";".join(names[c] for c in r.excluded)])
