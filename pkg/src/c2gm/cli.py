"""Command-line entry point: ``c2gm <command> [--config FILE] [flags]``.

Every flag can also come from a ``key = value`` config file (keys are the
flag names without dashes, ``-`` or ``_``); flags given on the command
line win. Exit status is 0 on success, 1 on a contract violation or
failed check, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, NonFiniteError

log = logging.getLogger("c2gm")

_DEFAULTS: dict[str, dict[str, object]] = {}
_COMMON = {"seed": 0, "threads": 1, "profile": "desk", "out": None, "verbose": False}


class UsageError(Exception):
    pass


def _opt(p: argparse.ArgumentParser, cmd: str, flag: str, default=None, **kw) -> None:
    dest = flag.lstrip("-").replace("-", "_")
    _DEFAULTS.setdefault(cmd, {})[dest] = default
    p.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def _parse_tile(text: str):
    from .tiles import TileCoord

    return TileCoord.parse(text)


def _parse_tiles(text: str):
    return [_parse_tile(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2gm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", default=None, help="key=value config file; flags override it")
        _opt(p, name, "--seed", _COMMON["seed"], type=int, help="global seed for every derived RNG")
        _opt(p, name, "--threads", _COMMON["threads"], type=int, help="worker pool size")
        _opt(p, name, "--profile", _COMMON["profile"], choices=["desk", "paper"], help="hyperparameter profile")
        _opt(p, name, "--out", None, help="output path")
        _opt(p, name, "--verbose", False, action="store_true")
        return p

    p = command("build-dataset", "ingest paired RS/map tiles and write a manifest with cascade references")
    _opt(p, "build-dataset", "--store", None, help="tile store directory (written)")
    _opt(p, "build-dataset", "--source", None, help="local source directory laid out {layer}/{z}/{x}/{y}.png")
    _opt(p, "build-dataset", "--rs-url", None, help="XYZ URL template for RS tiles ({z} {x} {y} {key})")
    _opt(p, "build-dataset", "--map-url", None, help="XYZ URL template for map tiles")
    _opt(p, "build-dataset", "--roots", None, type=_parse_tiles, help="comma-separated base tiles z/x/y")
    _opt(p, "build-dataset", "--depth", 2, type=int, help="levels below each root to ingest")
    _opt(p, "build-dataset", "--factor", 2, type=int, choices=[2, 4], help="cascade factor of the references")
    _opt(p, "build-dataset", "--tile-px", 256, type=int)
    _opt(p, "build-dataset", "--test-fraction", 0.2, type=float)
    _opt(p, "build-dataset", "--rate", 2.0, type=float, help="requests per second for URL sources")
    _opt(p, "build-dataset", "--retries", 3, type=int)
    _opt(p, "build-dataset", "--synthetic", False, action="store_true",
         help="render a procedural source for --roots into --source first")

    p = command("train", "train the conditional denoiser")
    _opt(p, "train", "--manifest", None, help="dataset manifest (TSV)")
    _opt(p, "train", "--store", None, help="tile store (defaults to the manifest directory)")
    _opt(p, "train", "--split", "train")
    _opt(p, "train", "--fixture", False, action="store_true", help="train on the 16-pair synthetic overfit set")
    _opt(p, "train", "--steps", None, type=int)
    _opt(p, "train", "--batch-size", None, type=int)
    _opt(p, "train", "--lr", None, type=float)
    _opt(p, "train", "--log-every", 50, type=int)

    p = command("cascade", "generate a tile pyramid from seed tiles")
    _opt(p, "cascade", "--checkpoint", None, help="trained checkpoint (omit with --mock)")
    _opt(p, "cascade", "--mock", False, action="store_true", help="use the reference-reproducing mock generator")
    _opt(p, "cascade", "--store", None, help="tile store holding seed map tiles and RS tiles")
    _opt(p, "cascade", "--seeds", None, type=_parse_tiles, help="comma-separated seed tiles z/x/y")
    _opt(p, "cascade", "--seed-level", None, type=int)
    _opt(p, "cascade", "--seed-col", None, type=int)
    _opt(p, "cascade", "--seed-row", None, type=int)
    _opt(p, "cascade", "--seed-image", None, help="PNG for a single seed tile instead of the store")
    _opt(p, "cascade", "--blank-rs", False, action="store_true", help="zero RS tiles (mock generator only)")
    _opt(p, "cascade", "--n", 1, type=int, help="levels per stage")
    _opt(p, "cascade", "--m", 1, type=int, help="number of stages")
    _opt(p, "cascade", "--tile-px", None, type=int)
    _opt(p, "cascade", "--latent-factor", 8, type=int, help="mock generator latent factor")
    _opt(p, "cascade", "--sampler", "ddim", choices=["ddim", "ddpm"])
    _opt(p, "cascade", "--steps", 25, type=int, help="DDIM steps")

    p = command("stitch", "stitch same-level tiles {col}_{row}.png into one canvas")
    _opt(p, "stitch", "--tiles", None, help="directory of {col}_{row}.png tiles")

    p = command("evaluate", "PSNR/SSIM/FID-lite report of predictions against ground truth")
    _opt(p, "evaluate", "--pred", None)
    _opt(p, "evaluate", "--truth", None)
    _opt(p, "evaluate", "--truth-store", False, action="store_true",
         help="truth is a tile store; compare pyramid tiles with its map layer")
    _opt(p, "evaluate", "--skip-levels", "", help="comma-separated levels to leave out (e.g. the seed level)")

    p = command("grad-check", "finite-difference check of every layer")
    _opt(p, "grad-check", "--only", None, help="comma-separated layer names")

    p = command("selftest", "quick headless property suite")
    _opt(p, "selftest", "--quick", False, action="store_true", help="skip the slower checks")
    return parser


def _read_config(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _convert(parser: argparse.ArgumentParser, cmd: str, key: str, value: str):
    sub = next(a for a in parser._subparsers._group_actions if a.dest == "command").choices[cmd]
    action = next((a for a in sub._actions if a.dest == key), None)
    if action is None:
        raise UsageError(f"unknown config key {key!r} for {cmd}")
    if isinstance(action, argparse._StoreTrueAction):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    try:
        converted = action.type(value) if action.type else value
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config key {key!r}: {exc}") from None
    if action.choices is not None and converted not in action.choices:
        raise UsageError(f"config key {key!r}: {converted!r} not in {list(action.choices)}")
    return converted


def resolve(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags, fold in the config file, then fill remaining defaults."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    cmd = ns.command
    merged = dict(_DEFAULTS[cmd])
    if ns.config:
        for k, v in _read_config(ns.config).items():
            merged[k] = _convert(parser, cmd, k, v)
    merged.update({k: v for k, v in vars(ns).items() if k not in ("command", "config")})
    return argparse.Namespace(command=cmd, config=ns.config, **merged)


def _need(cfg, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise UsageError(f"{cfg.command}: missing required option(s) " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------------------
# commands


def cmd_build_dataset(cfg) -> int:
    from .dataset import LocalSource, UrlSource, build_manifest, ingest_tiles, region_tiles
    from .synthetic import write_source

    _need(cfg, "store", "roots")
    tiles = region_tiles(cfg.roots, cfg.depth)
    if cfg.synthetic:
        _need(cfg, "source")
        for i, root in enumerate(cfg.roots):
            write_source(cfg.source, root, cfg.depth, cfg.tile_px, seed=cfg.seed * 7919 + i)
    if cfg.source:
        source = LocalSource(cfg.source)
    elif cfg.rs_url and cfg.map_url:
        source = UrlSource({"rs": cfg.rs_url, "map": cfg.map_url}, rate=cfg.rate, retries=cfg.retries)
    else:
        raise UsageError("build-dataset needs --source or both --rs-url and --map-url")
    report = ingest_tiles(source, tiles, cfg.store, workers=cfg.threads)
    print(f"ingest: fetched {report.fetched}, skipped {report.skipped}, missing {len(report.missing)}, "
          f"failed {len(report.failed)}, quarantined {len(report.quarantined)}")
    for layer, c, why in report.failed:
        print(f"  failed {layer} {c}: {why}")
    out = cfg.out or Path(cfg.store) / f"manifest_{cfg.factor}x.tsv"
    manifest = build_manifest(cfg.store, cfg.factor, test_fraction=cfg.test_fraction, seed=cfg.seed,
                              tile_px=cfg.tile_px, path=out)
    counts = ", ".join(f"level {z}: {n}" for z, n in sorted(manifest.counts.items()))
    print(f"manifest {out}: {len(manifest.records)} pairs ({counts})")
    return 0


def cmd_train(cfg) -> int:
    from .dataset import DatasetManifest, load_pairs
    from .model import SGDM, final_loss, fit, get_profile, make_train_state, save_run, training_data
    from .synthetic import overfit_pairs

    _need(cfg, "out")
    overrides = {k: getattr(cfg, k) for k in ("steps", "batch_size", "lr") if getattr(cfg, k) is not None}
    profile = get_profile(cfg.profile, **overrides)
    if cfg.fixture:
        pairs = overfit_pairs(tile_px=profile.tile_px, seed=cfg.seed)
        maps, rs, refs, prompts = pairs.maps, pairs.rs, pairs.refs, pairs.prompts
    else:
        _need(cfg, "manifest")
        manifest = DatasetManifest.read(cfg.manifest)
        if manifest.tile_px != profile.tile_px:
            raise ContractViolation(f"manifest tiles are {manifest.tile_px}px, profile {profile.name} "
                                    f"expects {profile.tile_px}px")
        store = cfg.store or Path(cfg.manifest).parent
        maps, rs, refs, prompts, _ = load_pairs(manifest, store, cfg.split)
    model = SGDM(profile, seed=cfg.seed)
    data = training_data(model, maps, rs, refs, prompts)
    state = make_train_state(model, seed=cfg.seed)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\tlr\twallclock_s\n")

        def emit(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        fit(data, state, profile.steps, profile.batch_size, log=emit, log_every=cfg.log_every)
    loss = final_loss(state.losses)
    save_run(model, out, cfg.seed, {"final_loss": loss, "pairs": len(prompts)})
    print(f"final loss (mean of last 100 steps) {loss:.6f}; checkpoint {out}")
    return 0


def _seed_coords(cfg):
    from .tiles import TileCoord

    if cfg.seeds:
        return list(cfg.seeds)
    _need(cfg, "seed_level")
    return [TileCoord(cfg.seed_level, cfg.seed_col or 0, cfg.seed_row or 0)]


def cmd_cascade(cfg) -> int:
    from .cascade import CascadeJob, MockDenoiser, ModelDenoiser, run_cascade, write_pyramid
    from .codec import LatentSpec
    from .dataset import tile_path
    from .diffusion import SamplerSpec, desk_schedule
    from .images import load_png
    from .model import load_run
    from .tiles import StagePlan

    _need(cfg, "out")
    if cfg.mock == bool(cfg.checkpoint):
        raise UsageError("cascade needs exactly one of --mock or --checkpoint")
    if cfg.blank_rs and not cfg.mock:
        raise UsageError("--blank-rs is only meaningful with --mock")
    seeds = _seed_coords(cfg)
    if cfg.seed_image:
        if len(seeds) != 1:
            raise UsageError("--seed-image gives exactly one seed tile")
        seed_tiles = {seeds[0]: load_png(cfg.seed_image)}
    else:
        _need(cfg, "store")
        seed_tiles = {}
        for c in seeds:
            path = tile_path(cfg.store, "map", c)
            if not path.exists():
                raise ContractViolation(f"seed tile {c} not found at {path}")
            seed_tiles[c] = load_png(path)
    px = next(iter(seed_tiles.values())).shape[1]
    if cfg.tile_px is not None and cfg.tile_px != px:
        raise ContractViolation(f"seed tiles are {px}px, --tile-px says {cfg.tile_px}")
    if cfg.mock:
        denoiser = MockDenoiser(LatentSpec(factor=cfg.latent_factor), desk_schedule(50))
    else:
        model, _ = load_run(cfg.checkpoint)
        if model.profile.tile_px != px:
            raise ContractViolation(f"checkpoint expects {model.profile.tile_px}px tiles, seeds are {px}px")
        denoiser = ModelDenoiser(model)
    if cfg.blank_rs:
        def rs_provider(c):
            return np.zeros((3, px, px))
    else:
        _need(cfg, "store")

        def rs_provider(c):
            path = tile_path(cfg.store, "rs", c)
            return load_png(path) if path.exists() else None
    plan = StagePlan(seeds[0].level, cfg.n, cfg.m, px, px)
    job = CascadeJob(seed_tiles, rs_provider, plan, SamplerSpec(cfg.sampler, cfg.steps), cfg.seed)
    result = run_cascade(job, denoiser, workers=cfg.threads, log=print)
    write_pyramid(result, cfg.out)
    config = {k: (str(v) if k in ("seeds",) else v) for k, v in vars(cfg).items()}
    (Path(cfg.out) / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n",
                                                  encoding="utf-8")
    print(f"{result.generated_count()} tiles over levels {result.levels[1:]}; "
          f"{sum(1 for z in result.canvases if z != plan.base_level)} canvases written to {cfg.out}")
    return 0


def cmd_stitch(cfg) -> int:
    import re

    from .cascade import stitch
    from .images import load_png, save_png
    from .tiles import TileCoord

    _need(cfg, "tiles", "out")
    pattern = re.compile(r"^(\d+)_(\d+)$")
    tiles = {}
    for png in sorted(Path(cfg.tiles).glob("*.png")):
        m = pattern.match(png.stem)
        if m:
            tiles[TileCoord(0, int(m.group(1)), int(m.group(2)))] = load_png(png)
    if not tiles:
        raise ContractViolation(f"no {{col}}_{{row}}.png tiles in {cfg.tiles}")
    canvas = stitch(tiles)
    save_png(cfg.out, canvas)
    print(f"stitched {len(tiles)} tiles into {canvas.shape[2]}x{canvas.shape[1]} {cfg.out}")
    return 0


def cmd_evaluate(cfg) -> int:
    from .evaluation import evaluate_dirs, format_report

    _need(cfg, "pred", "truth")
    skip = [s.strip() for s in str(cfg.skip_levels).split(",") if s.strip()]
    report = format_report(evaluate_dirs(cfg.pred, cfg.truth, store_layout=cfg.truth_store, skip_levels=skip))
    print(report, end="")
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(report, encoding="utf-8")
    return 0


def cmd_grad_check(cfg) -> int:
    from .gradsuite import LAYER_CHECKS, format_table, run_suite

    only = [s.strip() for s in cfg.only.split(",")] if cfg.only else None
    if only:
        known = {name for name, _, _ in LAYER_CHECKS}
        unknown = [o for o in only if o not in known]
        if unknown:
            raise UsageError(f"unknown layer(s) {unknown}; choose from {sorted(known)}")
    results = run_suite(cfg.seed, only)
    table = format_table(results)
    print(table)
    if cfg.out:
        Path(cfg.out).write_text(table + "\n", encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(cfg) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(quick=cfg.quick, seed=cfg.seed) else 1


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "cascade": cmd_cascade,
    "stitch": cmd_stitch,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = resolve(argv)
    except UsageError as exc:
        print(f"c2gm: usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"c2gm {cfg.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, NonFiniteError, OSError) as exc:
        print(f"c2gm {cfg.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        from .cascade import CascadeError

        if isinstance(exc, CascadeError):
            print(f"c2gm {cfg.command}: error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
