"""NEMESIS masked autoencoder built on :mod:`nemesis.ndnum`.

Data flow for one superpatch::

    tokens [G^3 x p^3] --(keep visible rows)--> embed_patches
        h_LP = x W_LP + b_LP
        h_SE = SAB([x W_SE + b_SE ; NT])       (patch rows; NT rows go on)
        h    = a h_LP + (1 - a) h_SE + pos      a = sigmoid(gate logit)
    [h ; NT] -> MATB x depth -> LayerNorm                          (latent)
    latent -> W_dec -> scatter with mask token -> + pos_dec -> [. ; NT]
        -> MATB x decoder_depth -> LayerNorm -> drop NT -> head     (x_hat)
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import ndnum as nd
from ..errors import ConfigError, DimensionError, GeometryError, ParameterError
from ..superpatch import (PatchTokens, SuperpatchGrid, partition, patchify, stitch, token_coords,
                          unpatchify, voxel_token_mask)
from ..volume import Volume, corrupt_gaussian
from .masking import AXES, STRATEGIES, MaskSpec, axis_index, gen_mask, stream_masks

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    superpatch: int = 32
    patch: int = 8
    dim: int = 64
    depth: int = 2
    decoder_depth: int = 2
    decoder_dim: int = 0
    heads: int = 4
    decoder_heads: int = 0
    nt_tokens: int = 4
    mask_ratio: float = 0.75
    strategy: str = "dual"
    axis: str = "z"
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        # 0 means "derive from dim/heads"
        if self.decoder_dim == 0:
            object.__setattr__(self, "decoder_dim", max(self.dim // 2, 1))
        if self.decoder_heads == 0:
            object.__setattr__(self, "decoder_heads", self.heads)
        self.validate()

    @property
    def grid(self) -> int:
        return self.superpatch // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid ** 3

    @property
    def patch_voxels(self) -> int:
        return self.patch ** 3

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def axis_id(self) -> int:
        return AXES[self.axis]

    def validate(self) -> None:
        if self.patch <= 0 or self.superpatch <= 0 or self.superpatch % self.patch:
            raise ConfigError(f"patch side {self.patch} must divide superpatch side {self.superpatch}")
        if self.grid < 2:
            raise ConfigError("superpatch must hold at least 2 tokens per axis")
        for name in ("dim", "depth", "heads", "decoder_dim", "decoder_heads", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.decoder_depth < 0 or self.nt_tokens < 0:
            raise ConfigError("decoder_depth and nt_tokens must be >= 0")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_dim {self.decoder_dim} is not divisible by "
                              f"decoder_heads {self.decoder_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.axis not in AXES:
            raise ConfigError(f"unknown axis {self.axis!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters ------------------------------------------------------------------


def _attn_shapes(prefix: str, d: int) -> list:
    out = []
    for part in ("q", "k", "v", "o"):
        out += [(f"{prefix}.{part}.w", (d, d), "matrix"), (f"{prefix}.{part}.b", (d,), "small")]
    return out


def _norm_shapes(prefix: str, d: int) -> list:
    return [(f"{prefix}.g", (d,), "ones"), (f"{prefix}.b", (d,), "zeros")]


def _mlp_shapes(prefix: str, d: int, ratio: int) -> list:
    return [(f"{prefix}.fc1.w", (d, ratio * d), "matrix"), (f"{prefix}.fc1.b", (ratio * d,), "small"),
            (f"{prefix}.fc2.w", (ratio * d, d), "matrix"), (f"{prefix}.fc2.b", (d,), "small")]


def _matb_shapes(prefix: str, d: int, ratio: int) -> list:
    return (_norm_shapes(f"{prefix}.ln1", d) + _attn_shapes(f"{prefix}.axis", d)
            + _attn_shapes(f"{prefix}.plane", d)
            + [(f"{prefix}.fuse.w", (2 * d, d), "matrix"), (f"{prefix}.fuse.b", (d,), "small")]
            + _norm_shapes(f"{prefix}.ln2", d) + _mlp_shapes(f"{prefix}.mlp", d, ratio))


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every learnable tensor, in a fixed order."""
    d, dd, pv, n, k, r = (cfg.dim, cfg.decoder_dim, cfg.patch_voxels, cfg.n_tokens,
                          cfg.nt_tokens, cfg.mlp_ratio)
    shapes = [("embed.lp.w", (pv, d), "matrix"), ("embed.lp.b", (d,), "small"),
              ("embed.se.w", (pv, d), "matrix"), ("embed.se.b", (d,), "small")]
    shapes += _norm_shapes("embed.sab.ln1", d) + _attn_shapes("embed.sab.attn", d)
    shapes += _norm_shapes("embed.sab.ln2", d) + _mlp_shapes("embed.sab.mlp", d, r)
    if k:
        shapes.append(("embed.nt", (k, d), "small"))
    shapes += [("embed.gate", (1,), "small"), ("enc.pos", (n, d), "small")]
    for b in range(cfg.depth):
        shapes += _matb_shapes(f"enc.blocks.{b}", d, r)
    shapes += _norm_shapes("enc.norm", d)
    shapes += [("dec.embed.w", (d, dd), "matrix"), ("dec.embed.b", (dd,), "small"),
               ("dec.mask_token", (dd,), "small"), ("dec.pos", (n, dd), "small")]
    for b in range(cfg.decoder_depth):
        shapes += _matb_shapes(f"dec.blocks.{b}", dd, r)
    shapes += _norm_shapes("dec.norm", dd)
    shapes += [("dec.head.w", (dd, pv), "matrix"), ("dec.head.b", (pv,), "small")]
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> nd.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def dtype(self):
        return self.config.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def with_arrays(self, arrays: dict) -> "ModelParams":
        """New params (fresh leaves) holding ``arrays`` under the same names."""
        if set(arrays) != set(self.tensors):
            raise DimensionError("parameter names do not match the model layout")
        tensors = {}
        for name, t in self.tensors.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: shape {arr.shape}, expected {t.shape}")
            tensors[name] = nd.parameter(arr, dtype=self.dtype)
        return ModelParams(self.config, tensors)

    def copy(self) -> "ModelParams":
        return self.with_arrays(self.arrays())

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded init: Xavier-uniform matrices, N(0, 0.02^2) small tensors, unit LN gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "matrix":
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-a, a, size=shape)
        elif kind == "small":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = nd.parameter(arr, dtype=cfg.dtype)
    return ModelParams(cfg, tensors)


# -- layers ------------------------------------------------------------------------


def linear(x: nd.Tensor, params: ModelParams, prefix: str) -> nd.Tensor:
    return nd.add_row(x @ params[f"{prefix}.w"], params[f"{prefix}.b"])


def norm(x: nd.Tensor, params: ModelParams, prefix: str) -> nd.Tensor:
    return nd.layernorm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], params.config.ln_eps)


def mlp(x: nd.Tensor, params: ModelParams, prefix: str) -> nd.Tensor:
    return linear(nd.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def attention(x: nd.Tensor, params: ModelParams, prefix: str, heads: int,
              bias: np.ndarray | None = None, trace: dict | None = None) -> nd.Tensor:
    """Multi-head self-attention; ``bias`` is an additive (0 / -inf) mask."""
    q = linear(x, params, f"{prefix}.q")
    k = linear(x, params, f"{prefix}.k")
    v = linear(x, params, f"{prefix}.v")
    d = x.shape[1]
    dh = d // heads
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (nd.slice_cols(t, lo, hi) if heads > 1 else t for t in (q, k, v))
        weights = nd.softmax_rows(nd.scale(qh @ nd.transpose(kh), 1.0 / math.sqrt(dh)), bias)
        if trace is not None:
            trace.setdefault(prefix, []).append(weights.data)
        outs.append(weights @ vh)
    mixed = nd.concat_cols(outs) if heads > 1 else outs[0]
    return linear(mixed, params, f"{prefix}.o")


def sab_block(x: nd.Tensor, params: ModelParams, prefix: str, heads: int,
              trace: dict | None = None) -> nd.Tensor:
    """Plain pre-norm transformer block with unrestricted attention."""
    x = x + attention(norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, None, trace)
    return x + mlp(norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp")


def _heads_for(params: ModelParams, prefix: str) -> int:
    cfg = params.config
    return cfg.decoder_heads if prefix.startswith("dec") else cfg.heads


def matb_block(h: nd.Tensor, coords: np.ndarray, params: ModelParams, prefix: str = "enc.blocks.0",
               n_global: int = 0, trace: dict | None = None) -> nd.Tensor:
    """Masked Anatomical Transformer Block.

    The first ``len(coords)`` rows of ``h`` are patch tokens at those grid
    coordinates; the last ``n_global`` rows are NEMESIS tokens, which attend
    to and are attended by everything. Both streams read the same pre-norm
    input; their outputs are concatenated and fused by one FC layer before
    the residual add.
    """
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] + n_global != h.shape[0]:
        raise DimensionError(f"matb_block: {coords.shape[0]} coords + {n_global} global rows "
                             f"vs input of {h.shape[0]} rows")
    heads = _heads_for(params, prefix)
    axis_bias, plane_bias = stream_masks(coords, params.config.axis_id, n_global)
    u = norm(h, params, f"{prefix}.ln1")
    h_axis = attention(u, params, f"{prefix}.axis", heads, axis_bias, trace)
    h_plane = attention(u, params, f"{prefix}.plane", heads, plane_bias, trace)
    h_fused = linear(nd.concat_cols([h_axis, h_plane]), params, f"{prefix}.fuse")
    if trace is not None:
        trace.setdefault(f"{prefix}.concat_width", []).append(2 * h.shape[1])
    h = h + h_fused
    return h + mlp(norm(h, params, f"{prefix}.ln2"), params, f"{prefix}.mlp")


# -- model ops -------------------------------------------------------------------------


def _rows(t, cfg: ModelConfig) -> np.ndarray:
    arr = t.tokens if isinstance(t, PatchTokens) else np.asarray(t)
    if arr.ndim != 2 or arr.shape[1] != cfg.patch_voxels:
        raise DimensionError(f"token rows of width {cfg.patch_voxels} expected, got {arr.shape}")
    return arr


def embed_patches(t, params: ModelParams, token_ids=None, trace: dict | None = None):
    """Adaptive patch embedding of the given token rows.

    ``t`` holds the rows to embed (a PatchTokens or an [n x p^3] array) and
    ``token_ids`` their positions in the G^3 grid (default: all, in order).
    Returns ``(h [n x d], nt_out [K x d] or None)``.
    """
    cfg = params.config
    rows = _rows(t, cfg)
    if token_ids is None:
        token_ids = np.arange(rows.shape[0])
    token_ids = np.asarray(token_ids, dtype=np.intp)
    if token_ids.shape != (rows.shape[0],) or rows.shape[0] > cfg.n_tokens:
        raise DimensionError(f"{rows.shape[0]} token rows vs {token_ids.size} token ids")
    x = nd.constant(rows, dtype=cfg.dtype)
    n = rows.shape[0]

    h_lp = linear(x, params, "embed.lp")
    seq = linear(x, params, "embed.se")
    if cfg.nt_tokens:
        seq = nd.concat_rows([seq, params["embed.nt"]])
    seq = sab_block(seq, params, "embed.sab", cfg.heads, trace)
    if cfg.nt_tokens:
        h_se = nd.take_rows(seq, np.arange(n))
        nt_out = nd.take_rows(seq, np.arange(n, n + cfg.nt_tokens))
    else:
        h_se, nt_out = seq, None

    alpha = nd.sigmoid(params["embed.gate"])
    fused = nd.scalar_mul(h_lp, alpha) + nd.scalar_mul(h_se, nd.rsub(1.0, alpha))
    if trace is not None:
        trace.update(h_lp=h_lp.data, h_se=h_se.data, h_fused=fused.data, alpha=alpha.item())
    h = fused + nd.take_rows(params["enc.pos"], token_ids)
    return h, nt_out


def encode(t: PatchTokens, mask: MaskSpec, params: ModelParams, trace: dict | None = None):
    """Embed the visible tokens, append NEMESIS tokens, run the MATB stack."""
    cfg = params.config
    _check_mask(mask, cfg)
    rows = _rows(t, cfg)
    vis = np.asarray(mask.visible, dtype=np.intp)
    h, nt_out = embed_patches(rows[vis], params, vis, trace)
    seq = nd.concat_rows([h, nt_out]) if nt_out is not None else h
    coords = token_coords(cfg.grid)[vis]
    for b in range(cfg.depth):
        seq = matb_block(seq, coords, params, f"enc.blocks.{b}", cfg.nt_tokens, trace)
    return norm(seq, params, "enc.norm"), mask


def decode(latent: nd.Tensor, mask: MaskSpec, params: ModelParams,
           trace: dict | None = None) -> nd.Tensor:
    """Reconstruct all G^3 patches from the encoder latent."""
    cfg = params.config
    n, k = cfg.n_tokens, cfg.nt_tokens
    vis = np.asarray(mask.visible, dtype=np.intp)
    hidden = np.asarray(mask.masked, dtype=np.intp)
    if latent.shape[0] != vis.size + k:
        raise DimensionError(f"latent has {latent.shape[0]} rows, mask implies {vis.size + k}")
    z = linear(latent, params, "dec.embed")
    pieces = [(vis, nd.take_rows(z, np.arange(vis.size)))]
    if hidden.size:
        pieces.append((hidden, nd.repeat_rows(params["dec.mask_token"], hidden.size)))
    full = nd.scatter_rows(n, pieces) + params["dec.pos"]
    seq = full
    if k:
        seq = nd.concat_rows([full, nd.take_rows(z, np.arange(vis.size, vis.size + k))])
    coords = token_coords(cfg.grid)
    for b in range(cfg.decoder_depth):
        seq = matb_block(seq, coords, params, f"dec.blocks.{b}", k, trace)
    seq = norm(seq, params, "dec.norm")
    if k:
        seq = nd.take_rows(seq, np.arange(n))
    return linear(seq, params, "dec.head")


def masked_mse(x, x_hat: nd.Tensor, mask: MaskSpec) -> nd.Tensor:
    """Mean over masked tokens of the squared L2 error of each p^3 patch."""
    target = x.tokens if isinstance(x, PatchTokens) else np.asarray(x)
    if target.shape != x_hat.shape:
        raise DimensionError(f"masked_mse: target {target.shape} vs reconstruction {x_hat.shape}")
    hidden = np.asarray(mask.masked, dtype=np.intp)
    if hidden.size == 0:
        raise ParameterError("masked_mse needs at least one masked token")
    diff = nd.take_rows(x_hat, hidden) - nd.constant(target[hidden], dtype=x_hat.dtype)
    return nd.scale(nd.sum(nd.square(diff)), 1.0 / hidden.size)


def reconstruction_loss(clean: PatchTokens, corrupted: PatchTokens, mask: MaskSpec,
                        params: ModelParams) -> nd.Tensor:
    latent, _ = encode(corrupted, mask, params)
    return masked_mse(clean, decode(latent, mask, params), mask)


def _check_mask(mask: MaskSpec, cfg: ModelConfig) -> None:
    if mask.grid != cfg.grid:
        raise DimensionError(f"mask grid {mask.grid} vs model grid {cfg.grid}")
    allidx = np.sort(np.concatenate([mask.visible, mask.masked]))
    if not np.array_equal(allidx, np.arange(cfg.n_tokens)):
        raise DimensionError("mask visible/masked sets must partition the token grid")
    if mask.visible.size == 0:
        raise ParameterError("mask leaves no visible tokens")


# -- stitched inference ----------------------------------------------------------------


def superpatch_seeds(seed: int, linear_index: int) -> tuple[np.random.SeedSequence, ...]:
    """(noise seed, mask seed) for one superpatch; independent of processing order."""
    return (np.random.SeedSequence([int(seed), int(linear_index), 0]),
            np.random.SeedSequence([int(seed), int(linear_index), 1]))


def compose(clean: PatchTokens, x_hat: np.ndarray, mask: MaskSpec) -> PatchTokens:
    """Clean tokens at visible positions, reconstructed tokens at masked ones."""
    out = np.array(clean.tokens, dtype=np.float64)
    hidden = np.asarray(mask.masked, dtype=np.intp)
    if hidden.size:
        out[hidden] = x_hat[hidden]
    return PatchTokens(out, clean.patch, clean.grid)


@dataclass
class Reconstruction:
    volume: Volume
    masked_voxels: np.ndarray
    masks: dict = field(default_factory=dict)


def reconstruct_volume(v: Volume, params: ModelParams, config: ModelConfig | None = None,
                       sigma: float = 0.1, seed: int = 0, threads: int = 1) -> Reconstruction:
    """Corrupt, mask, encode/decode and stitch every superpatch of ``v``.

    ``config`` may override the mask strategy/ratio/axis of the trained
    model (other fields must match). Results do not depend on ``threads``.
    """
    cfg = config or params.config
    base = params.config
    if (cfg.superpatch, cfg.patch, cfg.dim) != (base.superpatch, base.patch, base.dim):
        raise ConfigError("reconstruction config geometry differs from the checkpoint")
    run = replace(base, mask_ratio=cfg.mask_ratio, strategy=cfg.strategy, axis=cfg.axis)
    run_params = ModelParams(run, params.tensors)
    grid = SuperpatchGrid(v.dims, run.superpatch)

    def work(item):
        idx, sp = item
        noise_seed, mask_seed = superpatch_seeds(seed, grid.linear(idx))
        clean = patchify(sp, run.patch)
        noisy = patchify(corrupt_gaussian(sp, sigma, noise_seed), run.patch)
        mask = gen_mask(run.grid, run.mask_ratio, run.strategy, run.axis, mask_seed)
        with nd.no_grad():
            latent, _ = encode(noisy, mask, run_params)
            x_hat = decode(latent, mask, run_params).data
        merged = compose(clean, x_hat, mask)
        return idx, unpatchify(merged).astype(np.float32), mask

    items = partition(v, run.superpatch)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]

    volume = stitch([(idx, block) for idx, block, _ in results], grid, v.intensity_unit)
    masked_voxels = np.zeros(v.dims, dtype=bool)
    masks = {}
    for idx, _, mask in results:
        masked_voxels[grid.slices(idx)] = voxel_token_mask(mask.masked, run.patch, run.grid)
        masks[idx] = mask
    return Reconstruction(volume, masked_voxels, masks)


def mean_predictor_volume(v: Volume, masked_voxels: np.ndarray, side: int) -> Volume:
    """Baseline: fill each superpatch's masked voxels with the mean of its visible voxels."""
    if masked_voxels.shape != v.dims:
        raise GeometryError("masked voxel map does not match the volume")
    grid = SuperpatchGrid(v.dims, side)
    out = v.voxels.astype(np.float64).copy()
    for idx in grid.indices():
        sl = grid.slices(idx)
        block, hidden = out[sl], masked_voxels[sl]
        if hidden.any() and (~hidden).any():
            block[hidden] = block[~hidden].mean()
    return Volume(out.astype(np.float32), v.intensity_unit)


def check_geometry(dims, cfg: ModelConfig) -> SuperpatchGrid:
    return SuperpatchGrid(tuple(dims), cfg.superpatch)


__all__ = [
    "ModelConfig", "ModelParams", "init_params", "param_shapes", "embed_patches", "sab_block",
    "attention", "matb_block", "encode", "decode", "masked_mse", "reconstruction_loss",
    "reconstruct_volume", "mean_predictor_volume", "compose", "Reconstruction", "axis_index",
]
