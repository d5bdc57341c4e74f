"""Command-line entry point: ``pgalab {train,sample,eval,verify,make-data}``.

Exit codes: 0 success, 1 verification failure, 2 usage/config/missing input,
3 numeric abort.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import kernels
from .data import (SYNTHETIC_KINDS, emit_grid, generate_samples, make_synthetic,
                   mmd_permutation_test, write_mmd_csv, write_pgad)
from .errors import ConfigError, FormatError, NumericAbort, PgaError
from .logdet import MAX_EXACT_DIM, exact_nll, write_certification_csv
from .nets import load_checkpoint
from .trainer import TrainConfig, apply_overrides, emit_config, load_config, load_dataset, train
from . import verification as V

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def effective_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = _overrides(args.set)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return apply_overrides(cfg, pairs)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: TrainConfig, out: Path) -> None:
    text = emit_config(cfg)
    (out / "effective.cfg").write_text(text)
    print(text, end="")


def _need_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---- subcommands -----------------------------------------------------------

def run_train(args) -> int:
    cfg = effective_config(args)
    out = _out_dir(args, "run")
    _echo(cfg, out)
    result = train(cfg, out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"step {last['step']}: total={last['total']:.6g} exact_nll={last['exact_nll']:.6g} "
              f"mmd={last['mmd']:.6g}")
    print(f"checkpoint: {out / cfg.checkpoint}")
    return EXIT_OK


def run_sample(args) -> int:
    model, _, _ = _need_checkpoint(args)
    out = _out_dir(args, "samples")
    seed = 0 if args.seed is None else args.seed
    samples = generate_samples(model, args.n, seed)
    write_pgad(out / "samples.pgad", samples.values)
    print(f"wrote {out / 'samples.pgad'} ({args.n} x {model.data_dim})")
    if args.image:
        rows = max(1, int(math.sqrt(args.n)))
        cols = max(1, args.n // rows)
        path = emit_grid(samples.values[:rows * cols], rows, cols, out / "grid")
        print(f"wrote {path}")
    return EXIT_OK


def run_eval(args) -> int:
    model, _, _ = _need_checkpoint(args)
    cfg = effective_config(args)
    out = _out_dir(args, "eval")
    ds = load_dataset(cfg)
    held = (ds.eval if len(ds.eval) else ds.train)[:args.n]
    seed = cfg.seed
    gen = generate_samples(model, len(held), seed)
    reports = {"generated_vs_heldout": mmd_permutation_test(gen.values, held, args.permutations, seed)}
    train_x = ds.train[:len(held)]
    reports["generated_vs_train"] = mmd_permutation_test(gen.values, train_x, args.permutations, seed)
    write_mmd_csv(reports, out / "mmd.csv")
    for label, r in reports.items():
        print(f"{label}: mmd={r.statistic:.6g} threshold={r.threshold:.6g} {r.verdict}")
    if model.latent_dim <= MAX_EXACT_DIM:
        nll = exact_nll(model, held)
        (out / "nll.txt").write_text(f"{nll.mean!r}\n")
        print(f"exact_nll={nll.mean:.6g} (excluded {nll.excluded})")
    return EXIT_OK


def run_verify(args) -> int:
    out = _out_dir(args, "verify")
    seed = 0 if args.seed is None else args.seed
    if args.checkpoint:
        model, _, _ = _need_checkpoint(args)
        certs = V.checkpoint_certifications(model, seed, args.points, args.probes)
    else:
        certs = V.certification_matrix(seed, args.points, args.probes)
    identity = V.identity_certifications(seed, args.probes)
    singular = V.singular_certification(seed)
    write_certification_csv(certs + identity + [singular], out / "certification.csv")

    records = (V.certification_records(certs) + V.identity_records(identity)
               + V.certification_records([singular]) + V.kl_identity_records(seed)
               + V.reduction_records(seed) + V.routing_records(seed))
    report = out / "verify.csv"
    V.write_records_csv(records, report)

    width = max(len(r.case) for r in records)
    print(f"{'check':<16} {'case':<{width}} {'value':>12} {'tol':>10}  verdict")
    for r in records:
        print(f"{r.check:<16} {r.case:<{width}} {r.value:>12.3e} {r.tolerance:>10.1e}  {r.verdict}")
    failed = [r for r in records if not r.passed]
    print(f"{len(records) - len(failed)}/{len(records)} passed (backend: {kernels.BACKEND})")
    if failed:
        print(f"FAIL: see {report}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def run_make_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = make_synthetic(args.kind, args.n, seed)
    out = Path(args.out or f"{args.kind}.pgad")
    if out.suffix != ".pgad":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{args.kind}.pgad"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_pgad(out, ds.samples)
    print(f"wrote {out} ({ds.samples.shape[0]} x {ds.samples.shape[1]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pgalab", description="Perceptual generative autoencoder laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override (repeatable)")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.set_defaults(func=run_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(s, config=False)
    s.add_argument("--checkpoint")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--image", action="store_true", help="also write a PNM grid")
    s.set_defaults(func=run_sample)

    e = sub.add_parser("eval", help="MMD and exact NLL of a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--n", type=int, default=2000)
    e.add_argument("--permutations", type=int, default=200)
    e.set_defaults(func=run_eval)

    v = sub.add_parser("verify", help="run the estimator and loss self-checks")
    common(v, config=False)
    v.add_argument("--checkpoint")
    v.add_argument("--points", type=int, default=20)
    v.add_argument("--probes", type=int, default=10_000)
    v.set_defaults(func=run_verify)

    m = sub.add_parser("make-data", help="write a synthetic dataset as PGAD")
    common(m, config=False)
    m.add_argument("--kind", required=True, help=" | ".join(SYNTHETIC_KINDS))
    m.add_argument("--n", type=int, default=10_000)
    m.set_defaults(func=run_make_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"pgalab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"pgalab: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"pgalab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PgaError as exc:
        print(f"pgalab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
