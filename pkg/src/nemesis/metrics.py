"""Reconstruction quality (PSNR, SSIM) and an analytic transformer FLOP model.

FLOP convention: 2 FLOPs per multiply-accumulate, matmuls only (layernorm,
softmax, GELU and residual adds are not counted). Per transformer block on
``n`` tokens of width ``d`` with MLP expansion ``e``::

    projections  8 n d^2      Q, K, V and output, each n x d x d
    attention    4 n^2 d      scores Q K^T plus the weighted sum A V
    mlp          4 e n d^2    two n x d x (e d) layers (16 n d^2 at e = 4)

plus ``2 n P d`` for the patch embedding when ``patch_voxels`` = P is set,
and, with ``include_decoder``, the decoder blocks, the encoder-to-decoder
projection and the ``2 n d_dec P`` output head.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionError, GeometryError, ParameterError
from .superpatch import SuperpatchGrid, token_count
from .volume import Volume

REFERENCE_SUPERPATCH_GFLOPS = 31.0
REFERENCE_FULL_VOLUME_GFLOPS = 985.8


def _voxels(v) -> np.ndarray:
    return (v.voxels if isinstance(v, Volume) else np.asarray(v)).astype(np.float64)


def psnr(ref, test, peak: float = 1.0, region: np.ndarray | None = None) -> float:
    """10 log10(peak^2 / MSE) over ``region`` (all voxels by default); inf when MSE is 0."""
    a, b = _voxels(ref), _voxels(test)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ParameterError("psnr peak must be positive")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape:
            raise DimensionError("psnr: region mask shape differs from the volumes")
        if not region.any():
            raise ParameterError("psnr: empty region")
        a, b = a[region], b[region]
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def format_db(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def ssim(ref, test, window: int = 7, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean SSIM over every fully contained cubic window (uniform weights)."""
    a, b = _voxels(ref), _voxels(test)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0 or window > min(a.shape):
        raise ParameterError(f"ssim window must be odd and <= {min(a.shape)}, got {window}")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    half = window // 2
    core = tuple(slice(half, n - half) for n in a.shape)

    def local_mean(x):
        return uniform_filter(x, size=window, mode="constant")[core]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- quality report ------------------------------------------------------------------

QUALITY_COLUMNS = ("strategy", "mask_ratio", "psnr_masked_db", "psnr_full_db", "ssim",
                   "baseline_psnr_masked_db", "gain_over_baseline_db")


@dataclass
class QualityReport:
    strategy: str
    mask_ratio: float
    psnr_masked_db: float
    psnr_full_db: float
    ssim: float
    baseline_psnr_masked_db: float = float("nan")
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        gain = self.psnr_masked_db - self.baseline_psnr_masked_db
        return {"strategy": self.strategy, "mask_ratio": f"{self.mask_ratio:g}",
                "psnr_masked_db": format_db(self.psnr_masked_db),
                "psnr_full_db": format_db(self.psnr_full_db), "ssim": f"{self.ssim:.6f}",
                "baseline_psnr_masked_db": format_db(self.baseline_psnr_masked_db),
                "gain_over_baseline_db": "nan" if math.isnan(gain) else format_db(gain)}


def write_csv(rows: list[dict], path, columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def quality_reports_json(reports: list[QualityReport]) -> dict:
    rows = [r.row() for r in reports]
    out = {"rows": rows, "config": reports[0].config if reports else {}}
    by = {r.strategy: r.psnr_masked_db for r in reports}
    if "plane" in by and "axis" in by:
        out["plane_ge_axis"] = bool(by["plane"] >= by["axis"])
    return out


# -- compute cost ----------------------------------------------------------------------


@dataclass(frozen=True)
class CostConfig:
    tokens: int
    dim: int
    depth: int
    mlp_ratio: int = 4
    heads: int = 1
    include_decoder: bool = False
    patch_voxels: int = 0
    decoder_dim: int = 0
    decoder_depth: int = 0
    decoder_tokens: int = 0

    def __post_init__(self):
        for name in ("tokens", "dim", "depth", "mlp_ratio", "heads"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"cost config {name} must be positive")
        if min(self.patch_voxels, self.decoder_dim, self.decoder_depth, self.decoder_tokens) < 0:
            raise ParameterError("cost config extents must be >= 0")


def _block_terms(n: int, d: int, ratio: int) -> dict:
    return {"projections": 8 * n * d * d, "attention": 4 * n * n * d, "mlp": 4 * ratio * n * d * d}


def flops_breakdown(cc: CostConfig) -> dict[str, int]:
    """Raw FLOPs per named term (integers)."""
    per = _block_terms(cc.tokens, cc.dim, cc.mlp_ratio)
    terms = {f"encoder_{k}": cc.depth * v for k, v in per.items()}
    terms["embedding"] = 2 * cc.tokens * cc.patch_voxels * cc.dim
    if cc.include_decoder:
        n = cc.decoder_tokens or cc.tokens
        dd = cc.decoder_dim or cc.dim
        dper = _block_terms(n, dd, cc.mlp_ratio)
        terms.update({f"decoder_{k}": cc.decoder_depth * v for k, v in dper.items()})
        terms["decoder_embed"] = 2 * cc.tokens * cc.dim * dd
        terms["head"] = 2 * n * dd * cc.patch_voxels
    return terms


def flops_count(cc: CostConfig) -> int:
    return int(sum(flops_breakdown(cc).values()))


def flops_forward(cc: CostConfig) -> float:
    """GFLOPs of one forward pass."""
    return flops_count(cc) / 1e9


EFFICIENCY_COLUMNS = ("configuration", "volume_dims", "superpatch", "patch", "tokens_per_pass",
                      "passes", "gflops_per_pass", "gflops_total", "full_vit_over_pass")


def _dims_str(dims) -> str:
    return "x".join(str(int(n)) for n in dims)


def efficiency_report(model_cfg, dims, depth: int | None = None) -> list[dict]:
    """Superpatch pass vs whole-volume tiling vs one full-volume ViT pass.

    All rows use the encoder width and depth of ``model_cfg`` and count the
    full token set (no masking). ``full_vit_over_pass`` is the full-volume
    ViT cost divided by the row's per-pass cost.
    """
    grid = SuperpatchGrid(tuple(int(n) for n in dims), model_cfg.superpatch)
    depth = depth or model_cfg.depth
    kw = dict(dim=model_cfg.dim, depth=depth, mlp_ratio=model_cfg.mlp_ratio,
              heads=model_cfg.heads, patch_voxels=model_cfg.patch_voxels)
    per_pass = flops_forward(CostConfig(tokens=model_cfg.n_tokens, **kw))
    n_full = token_count(dims, model_cfg.patch)
    full = flops_forward(CostConfig(tokens=n_full, **kw))
    common = {"volume_dims": _dims_str(dims), "superpatch": model_cfg.superpatch,
              "patch": model_cfg.patch}
    return [
        {"configuration": "superpatch_pass", **common, "tokens_per_pass": model_cfg.n_tokens,
         "passes": 1, "gflops_per_pass": per_pass, "gflops_total": per_pass,
         "full_vit_over_pass": full / per_pass},
        {"configuration": "superpatch_tiling", **common, "tokens_per_pass": model_cfg.n_tokens,
         "passes": grid.total, "gflops_per_pass": per_pass, "gflops_total": grid.total * per_pass,
         "full_vit_over_pass": full / per_pass},
        {"configuration": "full_volume_vit", **common, "tokens_per_pass": n_full, "passes": 1,
         "gflops_per_pass": full, "gflops_total": full, "full_vit_over_pass": 1.0},
    ]


def token_ratio_rows(dims=(512, 512, 400), patch: int = 16, superpatch: int = 128,
                     dim: int = 768, depth: int = 12, mlp_ratio: int = 4) -> list[dict]:
    """One superpatch pass vs a full-volume ViT at the published geometry.

    The volume need not tile into superpatches; only the token counts matter.
    """
    if superpatch % patch:
        raise GeometryError(f"patch side {patch} does not divide superpatch side {superpatch}")
    n_sp = (superpatch // patch) ** 3
    n_full = token_count(dims, patch)
    kw = dict(dim=dim, depth=depth, mlp_ratio=mlp_ratio, patch_voxels=patch ** 3)
    sp = flops_forward(CostConfig(tokens=n_sp, **kw))
    full = flops_forward(CostConfig(tokens=n_full, **kw))
    common = {"volume_dims": _dims_str(dims), "superpatch": superpatch, "patch": patch}
    return [
        {"configuration": "reference_superpatch_pass", **common, "tokens_per_pass": n_sp, "passes": 1,
         "gflops_per_pass": sp, "gflops_total": sp, "full_vit_over_pass": full / sp},
        {"configuration": "reference_full_volume_vit", **common, "tokens_per_pass": n_full, "passes": 1,
         "gflops_per_pass": full, "gflops_total": full, "full_vit_over_pass": 1.0},
    ]


def format_efficiency(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        r = dict(r)
        for k in ("gflops_per_pass", "gflops_total"):
            r[k] = f"{r[k]:.6f}"
        r["full_vit_over_pass"] = f"{r['full_vit_over_pass']:.4f}"
        out.append(r)
    return out


def report_dict(report: QualityReport) -> dict:
    return asdict(report)
