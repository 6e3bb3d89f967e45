"""Command-line entry point.

    thama synth     CONFIG [--out DIR] [--seed N]
    thama pool      FRAMES.frm OUT.emb
    thama train     CONFIG [--out DIR] [--seed N]
    thama eval      CHECKPOINT VIEW1.emb [VIEW2.emb] [--out REPORT.json]
    thama xdomain   CONFIG [--out DIR] [--seed N]
    thama params    CONFIG
    thama gradcheck CONFIG [--seed N]

Exit codes: 0 ok, 2 configuration, 3 data/format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from thama import data as data_mod
from thama.autodiff import grad_check
from thama.config import RunConfig
from thama.data import DOMAIN_TAGS, SPLITS, EmbeddingSet, generate_synthetic, read_emb1, write_emb1
from thama.errors import ConfigError, DataFormatError, NumericalError, ThamaError
from thama.models import analytic_param_count, build_model, read_checkpoint, save_checkpoint
from thama.training import cross_domain_run, evaluate, train

log = logging.getLogger("thama")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _output_dir(cfg: RunConfig, override) -> Path:
    out = override or cfg.output
    if out is None:
        raise ConfigError("no output directory: set 'output' in the config or pass --out")
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_views(paths) -> tuple[EmbeddingSet, EmbeddingSet | None]:
    sets = []
    for p in paths:
        try:
            sets.append(read_emb1(p))
        except FileNotFoundError:
            raise DataFormatError(f"embedding file {p} not found") from None
    v1 = sets[0]
    v2 = sets[1] if len(sets) > 1 else None
    data_mod.check_aligned(v1, v2)
    return v1, v2


def _domain_sets(cfg: RunConfig) -> dict[str, dict]:
    """domain tag -> split -> (view1, view2 | None), from synthesis or files."""
    synth = cfg.synth_config()
    if synth is not None:
        syn = generate_synthetic(synth)
        kind = cfg.model["kind"]
        single = kind in ("fcn", "cnn")
        return {
            dom: {s: (pair[0], None) if single else pair for s, pair in splits.items()}
            for dom, splits in syn.splits.items()
        }
    if "paths" not in cfg.data:
        raise ConfigError("config has no data block")
    return {
        dom: {split: _read_views(paths) for split, paths in splits.items()}
        for dom, splits in cfg.data["paths"].items()
    }


def _dims(sets: dict) -> tuple[int, int | None]:
    dims = set()
    for splits in sets.values():
        for v1, v2 in splits.values():
            dims.add((v1.dim, None if v2 is None else v2.dim))
    if len(dims) != 1:
        raise DataFormatError(f"embedding dims differ across files: {sorted(dims, key=str)}")
    return dims.pop()


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    synth = cfg.synth_config()
    if synth is None:
        raise ConfigError("synth needs a data.synth block")
    out = _output_dir(cfg, args.out)
    syn = generate_synthetic(synth)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.data["synth"], "files": []}
    for dom, splits in syn.splits.items():
        for split in SPLITS:
            for view, eset in enumerate(splits[split], start=1):
                name = f"{dom}_{split}_view{view}.emb"
                write_emb1(eset, out / name)
                manifest["files"].append(
                    {"path": name, "domain": dom, "split": split, "view": view, "count": len(eset), "dim": eset.dim}
                )
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(manifest['files'])} EMB1 files to {out}")
    return EXIT_OK


def cmd_pool(args) -> int:
    try:
        fset = data_mod.read_frm1(args.frames)
    except FileNotFoundError:
        raise DataFormatError(f"frame file {args.frames} not found") from None
    pooled = data_mod.pool_frame_set(fset)
    write_emb1(pooled, args.out)
    print(f"pooled {len(pooled)} records (dim {pooled.dim}) into {args.out}")
    return EXIT_OK


def _prepare_training(cfg: RunConfig, out_override):
    out = _output_dir(cfg, out_override)
    tcfg = cfg.train_config()
    sets = _domain_sets(cfg)
    d1, d2 = _dims(sets)
    spec = cfg.model_spec(d1, d2)
    if (spec.d1, spec.d2 if spec.n_views == 2 else None) != (d1, d2):
        raise ConfigError(f"model dims ({spec.d1}, {spec.d2}) do not match data dims ({d1}, {d2})")
    return out, tcfg, sets, spec


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out, tcfg, sets, spec = _prepare_training(cfg, args.out)
    dom = cfg.train_domain
    if dom not in sets:
        raise ConfigError(f"train.domain {dom!r} has no data")
    splits = sets[dom]
    model = build_model(spec)
    start = time.perf_counter()
    result = train(model, splits["train"], splits["dev"], tcfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    _write_json(out / "history.json", {**result.history.to_dict(), **result.checkpoint.meta})
    if "test" in splits:
        report = evaluate(model, splits["test"], dom, dom)
        _write_json(out / "report.json", report.to_dict())
        print(f"{report.setting} EER {report.eer:.2f}%")
    print(f"trained {spec.kind} for {len(result.history)} epochs in {time.perf_counter() - start:.1f}s -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    pair = _read_views(args.views)
    model = ck.to_model()
    report = evaluate(model, pair, train_domain=args.train_domain)
    doc = report.to_dict()
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_xdomain(args) -> int:
    cfg = _load_config(args)
    out, tcfg, sets, spec = _prepare_training(cfg, args.out)
    missing = [d for d in DOMAIN_TAGS if d not in sets]
    if missing:
        raise ConfigError(f"xdomain needs data for both domains; missing {missing}")
    for dom in DOMAIN_TAGS:
        if "test" not in sets[dom]:
            raise ConfigError(f"xdomain needs a test split for domain {dom}")
    summary = []
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    for a, b in (("E", "C"), ("C", "E")):
        in_rep, out_rep, result = cross_domain_run(spec, sets[a], sets[b], tcfg, names=(a, b))
        sub = out / f"train_{a}"
        sub.mkdir(exist_ok=True)
        save_checkpoint(result.checkpoint, sub / "checkpoint.ckpt")
        _write_json(sub / "history.json", {**result.history.to_dict(), **result.checkpoint.meta})
        _write_json(sub / "report_in.json", in_rep.to_dict())
        _write_json(sub / "report_out.json", out_rep.to_dict())
        for rep in (in_rep, out_rep):
            summary.append(rep.to_dict())
            print(f"{rep.setting} EER {rep.eer:.2f}%")
    _write_json(out / "report.json", {"reports": summary})
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _load_config(args)
    synth = cfg.synth_config()
    spec = cfg.model_spec(*(synth.d1, synth.d2) if synth else (None, None))
    print(analytic_param_count(spec))
    return EXIT_OK


def run_gradcheck(cfg: RunConfig) -> float:
    gc = cfg.gradcheck_config()
    synth = cfg.synth_config()
    spec = cfg.model_spec(*(synth.d1, synth.d2) if synth else (None, None))
    model = build_model(spec, dtype=np.float64)
    rng = np.random.default_rng(gc.seed)
    views = [rng.standard_normal((gc.records, d)) for d in (spec.d1, spec.d2)[: spec.n_views]]
    labels = np.arange(gc.records) % 2
    return grad_check(
        model.graph,
        "loss",
        model.bindings(views, labels),
        gc.epsilon,
        training=spec.dropout > 0,
        rng=np.random.default_rng([gc.seed, 1]),
        seed=gc.seed,
    )


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    threshold = cfg.gradcheck_config().threshold
    start = time.perf_counter()
    err = run_gradcheck(cfg)
    print(f"max relative error {err:.3e} (threshold {threshold:g}, {time.perf_counter() - start:.1f}s)")
    if not err < threshold:
        raise NumericalError(f"gradient check failed: {err:.3e} >= {threshold:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thama", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, func, out=True, seed=True):
        sp = sub.add_parser(name)
        sp.add_argument("config", help="run configuration (JSON)")
        if out:
            sp.add_argument("--out", help="output directory (overrides 'output')")
        if seed:
            sp.add_argument("--seed", type=int, help="override the run seed")
        sp.set_defaults(func=func)
        return sp

    with_config("synth", cmd_synth)
    with_config("train", cmd_train)
    with_config("xdomain", cmd_xdomain)
    with_config("params", cmd_params, out=False, seed=False)
    with_config("gradcheck", cmd_gradcheck, out=False)

    sp = sub.add_parser("pool")
    sp.add_argument("frames")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_pool)

    sp = sub.add_parser("eval")
    sp.add_argument("checkpoint")
    sp.add_argument("views", nargs="+", help="one or two aligned EMB1 files")
    sp.add_argument("--out", help="report path")
    sp.add_argument("--train-domain", default=None)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ThamaError as exc:
        category = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERICAL: "numerical"}.get(exc.exit_code, "error")
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
