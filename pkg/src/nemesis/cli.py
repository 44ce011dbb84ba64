"""``nemesis`` command line: phantom | pretrain | reconstruct | probe | bench.

Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric failure.
Failures print one line to stderr: ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PhantomConfig, RunConfig, build_section, load_run_config
from .errors import ConfigError, FormatError, NemesisError, ParameterError
from .metrics import (EFFICIENCY_COLUMNS, REFERENCE_FULL_VOLUME_GFLOPS, REFERENCE_SUPERPATCH_GFLOPS,
                      QUALITY_COLUMNS, QualityReport, efficiency_report, format_efficiency, psnr,
                      quality_reports_json, ssim, token_ratio_rows, write_csv, write_json)
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.masking import STRATEGIES
from .model.network import init_params, mean_predictor_volume, reconstruct_volume
from .probe import build_table, label_sweep, write_sweep, write_sweep_long, write_table
from .training import AdamState, TrainLog, train, write_train_log
from .volume import (Organ, PhantomSpec, default_phantom_spec, load_labels, load_volume,
                     make_phantom, normalize, save_labels, save_volume)


class _Parser(argparse.ArgumentParser):
    """Argument errors use the same one-line format as every other failure."""

    def error(self, message):
        self.exit(2, f"error: UsageError: {message}\n")


def _add_shared(p: argparse.ArgumentParser, out_default: str = "out") -> None:
    p.add_argument("--config", default=None, help="JSON run config (strict schema)")
    p.add_argument("--seed", type=int, default=None, help="global seed; overrides the config")
    p.add_argument("--threads", type=int, default=None,
                   help="inference fan-out threads; overrides the config")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="nemesis", formatter_class=fmt,
                                     description="Superpatch masked autoencoder for 3D volumes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", formatter_class=fmt, help="write a synthetic phantom corpus")
    _add_shared(p, "corpus")
    p.add_argument("--spec", default=None, help="phantom corpus spec JSON (phantom section schema)")

    p = sub.add_parser("pretrain", formatter_class=fmt, help="masked reconstruction pretraining")
    _add_shared(p, "run")
    p.add_argument("--corpus", default=None, help="corpus directory (overrides paths.corpus)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-time", action="store_true",
                   help="add a wall-clock seconds column to train_log.csv (breaks byte stability)")

    p = sub.add_parser("reconstruct", formatter_class=fmt,
                       help="stitched reconstruction with a quality report per strategy")
    _add_shared(p, "recon")
    p.add_argument("--checkpoint", required=True, help="NEMC checkpoint")
    p.add_argument("--volume", required=True, help="NEMV volume in raw units")
    p.add_argument("--strategy", default="axis,plane",
                   help=f"comma-separated mask strategies from {', '.join(STRATEGIES)}")
    p.add_argument("--ratio", type=float, default=0.75, help="mask ratio in (0, 1)")
    p.add_argument("--sigma", type=float, default=None,
                   help="noise sigma; train.noise_sigma when omitted")

    p = sub.add_parser("probe", formatter_class=fmt, help="frozen-backbone linear probe sweep")
    _add_shared(p, "probe")
    p.add_argument("--checkpoint", required=True, help="NEMC checkpoint")
    p.add_argument("--corpus", default=None, help="corpus directory with train/ and test/")

    p = sub.add_parser("bench", formatter_class=fmt, help="analytic FLOP efficiency table")
    _add_shared(p, "bench")
    p.add_argument("--dims", type=int, nargs=3, default=None, metavar=("H", "W", "D"),
                   help="volume dims; bench.volume_dims when omitted")
    return parser


# -- helpers -----------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config, args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        rc = replace(rc, threads=args.threads)
    return rc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_files(root: Path, split: str) -> list[Path]:
    d = root / split
    if not d.is_dir():
        raise ConfigError(f"corpus split directory not found: {d}")
    files = sorted(d.glob("*.nemv"))
    if not files:
        raise ConfigError(f"no .nemv volumes in {d}")
    return files


def _corpus_root(args, rc: RunConfig) -> Path:
    root = args.corpus or rc.paths.corpus
    if not root:
        raise ConfigError("no corpus given (--corpus or paths.corpus)")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"corpus directory not found: {root}")
    return root


def _load_normalized(path: Path, rc: RunConfig):
    return normalize(load_volume(path, "hu"), *rc.window)


# -- commands ------------------------------------------------------------------------------


def _phantom_specs(pc: PhantomConfig) -> list[PhantomSpec]:
    seeds = [int(s) for s in np.random.SeedSequence(pc.seed).generate_state(pc.n_train + pc.n_test)]
    if not pc.organs:
        return [default_phantom_spec(pc.dims, s, pc.jitter, pc.scale_jitter, pc.background,
                                     pc.texture_sigma) for s in seeds]
    keys = {"id", "name", "shape", "center", "radii", "intensity"}
    base = []
    for i, o in enumerate(pc.organs):
        unknown = sorted(set(o) - keys)
        if unknown:
            raise ConfigError(f"organs[{i}]: unknown key {unknown[0]!r}")
        try:
            base.append(Organ(int(o["id"]), str(o["shape"]), tuple(float(x) for x in o["center"]),
                              tuple(float(x) for x in o["radii"]), float(o["intensity"]),
                              str(o.get("name", ""))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"organs[{i}]: malformed organ ({exc})") from None
    PhantomSpec(pc.dims, tuple(base), pc.background).validate()
    specs = []
    for s in seeds:
        rng = np.random.default_rng(s)
        organs = []
        for o in base:
            shift = rng.uniform(-pc.jitter, pc.jitter, size=3) * (np.array(pc.dims) - 1)
            organs.append(replace(o, center=tuple(float(c + d) for c, d in zip(o.center, shift))))
        specs.append(PhantomSpec(pc.dims, tuple(organs), pc.background, s, pc.texture_sigma))
    return specs


def cmd_phantom(args) -> int:
    rc = _run_config(args)
    pc = rc.phantom
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise ConfigError(f"phantom spec not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"phantom spec is not valid JSON: {exc.msg}") from None
        pc = build_section(PhantomConfig, data, "phantom", rc.seed)
    specs = _phantom_specs(pc)
    out = _out_dir(args)
    manifest = {"window": list(rc.window), "dims": list(pc.dims), "train": [], "test": []}
    for i, spec in enumerate(specs):
        split = "train" if i < pc.n_train else "test"
        vol, lab = make_phantom(spec)
        (out / split).mkdir(exist_ok=True)
        stem = f"phantom_{i:03d}"
        save_volume(vol, out / split / f"{stem}.nemv")
        save_labels(lab, out / split / f"{stem}.neml")
        manifest[split].append(stem)
    write_json(manifest, out / "manifest.json")
    print(f"wrote {pc.n_train} train and {pc.n_test} test phantoms to {out}")
    return 0


def _log_records(meta: dict) -> list:
    return [dict(step=s, loss=l, lr=r, seconds=0.0) for s, l, r in meta.get("log", [])]


def cmd_pretrain(args) -> int:
    rc = _run_config(args)
    root = _corpus_root(args, rc)
    volumes = [_load_normalized(f, rc) for f in _corpus_files(root, "train")]
    out = _out_dir(args)
    params, state, prior = init_params(rc.model), None, []
    if args.resume:
        params, meta, extra = load_checkpoint(args.resume)
        if params.config != rc.model:
            raise ConfigError("resume checkpoint model config differs from the run config")
        state = AdamState.from_arrays(int(meta.get("step", 0)), extra)
        prior = _log_records(meta)
        if state.t > rc.train.steps:
            raise ConfigError(f"checkpoint step {state.t} is beyond train.steps {rc.train.steps}")

    def on_checkpoint(step, p, st, log):
        records = prior + log.records
        meta = {"step": step, "train": rc.train.to_dict(), "window": list(rc.window),
                "log": [[r["step"], r["loss"], r["lr"]] for r in records]}
        save_checkpoint(out / f"ckpt_{step}.nemc", p, meta, st.arrays())

    params, log = train(params, volumes, rc.train, state, on_checkpoint)
    if rc.train.steps == 0 or (state is not None and state.t == rc.train.steps):
        on_checkpoint(rc.train.steps, params, state or AdamState(), log)
    full = TrainLog(records=prior + log.records)
    write_train_log(full, out / "train_log.csv", with_time=args.log_time)
    print(f"trained to step {rc.train.steps}; checkpoint {out / f'ckpt_{rc.train.steps}.nemc'}")
    return 0


def cmd_reconstruct(args) -> int:
    rc = _run_config(args)
    if not 0.0 < args.ratio < 1.0:
        raise ParameterError(f"--ratio must lie in (0, 1), got {args.ratio}")
    strategies = [s.strip() for s in args.strategy.split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGIES:
            raise ParameterError(f"unknown strategy {s!r}")
    params, meta, _ = load_checkpoint(args.checkpoint)
    window = tuple(meta.get("window", rc.window))
    sigma = rc.train.noise_sigma if args.sigma is None else args.sigma
    if sigma < 0:
        raise ParameterError("--sigma must be >= 0")
    clean = normalize(load_volume(args.volume, "hu"), *window)
    out = _out_dir(args)
    reports = []
    for strategy in strategies:
        cfg = replace(params.config, strategy=strategy, mask_ratio=args.ratio)
        rec = reconstruct_volume(clean, params, cfg, sigma, rc.seed, rc.threads)
        base = mean_predictor_volume(clean, rec.masked_voxels, cfg.superpatch)
        save_volume(rec.volume, out / f"recon_{strategy}.nemv")
        snapshot = {"model": cfg.to_dict(), "sigma": sigma, "seed": rc.seed, "window": list(window)}
        reports.append(QualityReport(strategy, args.ratio,
                                     psnr(clean, rec.volume, 1.0, rec.masked_voxels),
                                     psnr(clean, rec.volume, 1.0), ssim(clean, rec.volume),
                                     psnr(clean, base, 1.0, rec.masked_voxels), snapshot))
    write_csv([r.row() for r in reports], out / "quality_report.csv", QUALITY_COLUMNS)
    write_json(quality_reports_json(reports), out / "quality_report.json")
    for r in reports:
        row = r.row()
        print(f"{row['strategy']:>6}  masked PSNR {row['psnr_masked_db']} dB  "
              f"full PSNR {row['psnr_full_db']} dB  SSIM {row['ssim']}")
    return 0


def cmd_probe(args) -> int:
    rc = _run_config(args)
    params, _, _ = load_checkpoint(args.checkpoint)
    if "model" in rc.explicit and rc.model.dim != params.config.dim:
        raise ConfigError(f"config model.dim {rc.model.dim} differs from checkpoint dim "
                          f"{params.config.dim}")
    root = _corpus_root(args, rc)
    pairs = {}
    for split in ("train", "test"):
        items = []
        for f in _corpus_files(root, split):
            lab_path = f.with_suffix(".neml")
            if not lab_path.is_file():
                raise FormatError(f"missing label grid {lab_path}")
            items.append((_load_normalized(f, rc), load_labels(lab_path)))
        pairs[split] = items
    pc = rc.probe
    train_t = build_table(pairs["train"], params, pc, "train", threads=rc.threads)
    test_t = build_table(pairs["test"], params, pc, "test", threads=rc.threads)
    rows = label_sweep(train_t, test_t, pc)
    out = _out_dir(args)
    write_table(train_t, out / "probe_train.csv")
    write_table(test_t, out / "probe_test.csv")
    write_sweep(rows, out / "sweep.csv", pc.n_organs)
    write_sweep_long(rows, out / "sweep_long.csv", pc.n_organs)
    for r in rows:
        print(f"{r.fraction * 100:5.0f}%  n={r.n_train:4d}  AUROC {r.auroc:.4f}  F1 {r.macro_f1:.4f}")
    return 0


def cmd_bench(args) -> int:
    rc = _run_config(args)
    dims = tuple(args.dims) if args.dims else rc.bench.volume_dims
    b = rc.bench
    rows = efficiency_report(rc.model, dims)
    rows += token_ratio_rows(b.reference_dims, b.reference_patch, b.reference_superpatch, b.reference_dim,
                             b.reference_depth, rc.model.mlp_ratio)
    out = _out_dir(args)
    formatted = format_efficiency(rows)
    write_csv(formatted, out / "efficiency.csv", EFFICIENCY_COLUMNS)
    reference_ratio = REFERENCE_FULL_VOLUME_GFLOPS / REFERENCE_SUPERPATCH_GFLOPS
    write_json({"rows": formatted, "reference_reported_ratio": round(reference_ratio, 4),
                "reference_reported_gflops": {"superpatch": REFERENCE_SUPERPATCH_GFLOPS,
                                          "full_volume": REFERENCE_FULL_VOLUME_GFLOPS}},
               out / "efficiency.json")
    for r in formatted:
        print(f"{r['configuration']:>22}  tokens {r['tokens_per_pass']:>6}  "
              f"GFLOPs/pass {r['gflops_per_pass']}  full-ViT/pass {r['full_vit_over_pass']}x")
    return 0


COMMANDS = {"phantom": cmd_phantom, "pretrain": cmd_pretrain, "reconstruct": cmd_reconstruct,
            "probe": cmd_probe, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NemesisError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
