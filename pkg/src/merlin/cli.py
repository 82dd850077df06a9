"""Command line: ``merlin run``, ``merlin report``, ``merlin export-latents``.

Config files are flat ``key = value`` lines (``#`` starts a comment); keys are
:class:`merlin.harness.RunConfig` fields. Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
import typing
from pathlib import Path

from .harness import ConfigError, RunConfig, load, persist, report, run, summarize
from .rng import stream
from .vae import GaussianDiag, PriorStore, export_latents, write_latents

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, hint):
    raw = raw.strip()
    text = str(hint)
    if raw.lower() in ("none", "null", ""):
        return None
    if "bool" in text:
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if "tuple" in text:
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    try:
        if "int" in text:
            return int(raw)
        if "float" in text:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return raw


def parse_config_text(text: str) -> dict:
    hints = typing.get_type_hints(RunConfig)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val, hints[key])
    return out


def build_config(args) -> RunConfig:
    values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "seeds": args.seed, "dataset": args.dataset, "mode": args.mode, "E": args.ensemble,
        "chunk_size": args.chunk_size, "buffer": args.buffer, "out": args.out,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    for flag in ("skip_vae", "sn_prior", "aux_clf_loss"):
        if getattr(args, flag):
            values[flag] = True
    return RunConfig(**values)


def _cmd_run(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out or "runs/latest")
    result = run(cfg)
    persist(result, out)
    print(f"wrote {out}")
    print(summarize([result]).render())
    return 0


def _cmd_report(args) -> int:
    s = report(args.dirs, args.csv)
    print(s.render())
    return 0


def _cmd_export(args) -> int:
    res = load(args.run)
    rows = []
    for sr in res.seeds:
        store = PriorStore()
        for mean, log_var in sr.meta.get("priors", []):
            store.freeze(GaussianDiag(mean, log_var))
        rows += export_latents(store, args.n, stream(sr.seed, "latents"))
    path = Path(args.run) / "latents.csv"
    write_latents(rows, path, res.config.latent_dim)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="merlin", description="Run, summarize and inspect MERLIN experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--seed", type=int, nargs="+")
    r.add_argument("--dataset", choices=["split_mnist", "permuted_mnist", "synthetic"])
    r.add_argument("--mode", choices=["aware", "agnostic"])
    r.add_argument("--ensemble", type=int, metavar="E")
    r.add_argument("--chunk-size", type=int, metavar="C")
    r.add_argument("--buffer", type=int, metavar="M")
    r.add_argument("--skip-vae", action="store_true")
    r.add_argument("--sn-prior", action="store_true")
    r.add_argument("--aux-clf-loss", action="store_true")
    r.add_argument("--out", metavar="DIR")
    r.set_defaults(fn=_cmd_run)

    rp = sub.add_parser("report", help="mean and std of final A and F across run directories")
    rp.add_argument("dirs", nargs="+")
    rp.add_argument("--csv", help="also write the summary here")
    rp.set_defaults(fn=_cmd_report)

    ex = sub.add_parser("export-latents", help="write draws from the stored task priors of a run")
    ex.add_argument("--run", required=True, metavar="DIR")
    ex.add_argument("-n", type=int, default=20, help="draws per task")
    ex.set_defaults(fn=_cmd_export)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
