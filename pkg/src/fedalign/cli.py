"""Command-line entry point: ``fedalign <subcommand> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import verify
from .al import (
    AlConfig,
    SelectorKind,
    pools_before_cycle,
    run_fal,
    select_coreset,
    select_energy_source,
    select_entropy,
    select_fedal,
    select_fedalv,
    select_random,
    selection_emd,
    write_cycles_csv,
)
from .datagen import STREAM_DOMAIN, generate_domain, write_csv_embeddings
from .fed import run_fdg, write_history_csv
from .numcore import make_rng
from .report import projection_rows, write_energy_log, write_manifest, write_projection, write_rows

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment JSON (all keys optional)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="parallel client workers")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write one CSV per synthetic domain")
    _add_common(p)

    p = sub.add_parser("train-fdg", help="federated domain generalisation run(s)")
    _add_common(p)
    p.add_argument("--baseline", choices=["feda", "fedavg"])
    p.add_argument("--all-targets", action="store_true", help="leave each domain out in turn")

    p = sub.add_parser("run-fal", help="federated active-learning campaign")
    _add_common(p)
    p.add_argument("--selector", choices=[k.value for k in SelectorKind])
    p.add_argument("--baseline", choices=["feda", "fedavg"])

    p = sub.add_parser("verify", help="gradient checks and algebraic self-tests")

    p = sub.add_parser("emd-eval", help="EMD of selected source latents to high-energy target latents")
    _add_common(p)
    return parser


def _load_config(args) -> dict:
    raw = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.resolve()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        over["out_dir"] = str(args.out)
    if getattr(args, "baseline", None):
        over["baseline"] = args.baseline
    if getattr(args, "selector", None):
        over["al"] = {**raw["al"], "selector": args.selector}
    raw.update(over)
    return cfgmod.resolve(raw)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    dcfg = cfgmod.build_dataset_config(cfg)
    outputs = []
    for d, spec in enumerate(cfgmod.build_domain_specs(cfg)):
        ds = generate_domain(spec, dcfg, make_rng(dcfg.seed, STREAM_DOMAIN, d))
        path = out / f"domain_{d}.csv"
        write_csv_embeddings(ds, path)
        outputs.append(path)
        print(f"domain {d}: {len(ds)} rows -> {path.name}")
    write_manifest(out, cfg, cfgmod.config_hash(cfg), outputs, {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_train_fdg(cfg: dict, all_targets: bool) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    fcfg = cfgmod.build_fed_config(cfg)
    targets = range(cfg["data"]["num_domains"]) if all_targets else [cfg["data"]["target_index"]]
    if cfg["data"]["csv_paths"] and all_targets:
        targets = range(len(cfg["data"]["csv_paths"]))
    outputs, timings, summary = [], {}, []
    for t in targets:
        ts = time.perf_counter()
        fed = cfgmod.build_federation(cfg, t)
        mcfg = _model_config(cfg, fed)
        res = run_fdg(fcfg, fed, mcfg, threads=cfg["threads"])
        sub = out / f"target_{t}"
        sub.mkdir(exist_ok=True)
        paths = [sub / "history.csv", sub / "energy.csv", sub / "ledger.csv", sub / "final_params.csv"]
        write_history_csv(res.history, paths[0])
        write_energy_log(paths[1], res.server.energy_log)
        res.ledger.write_csv(paths[2])
        write_rows(paths[3], ["index", "value"],
                   ((i, repr(float(v))) for i, v in enumerate(res.server.global_params)))
        outputs += paths
        summary.append((t, res.target_accuracy(), res.source_accuracy()))
        timings[f"target_{t}"] = time.perf_counter() - ts
        print(f"target {t}: target_acc={res.target_accuracy():.4f} "
              f"source_acc_mean={res.source_accuracy():.4f}")
    spath = out / "summary.csv"
    write_rows(spath, ["target", "target_acc", "source_acc_mean"], summary)
    outputs.append(spath)
    timings["total"] = time.perf_counter() - t0
    write_manifest(out, cfg, cfgmod.config_hash(cfg), outputs, timings)
    return EXIT_OK


def _model_config(cfg: dict, fed):
    num_classes = max(int(cfg["data"]["num_classes"]),
                      1 + max(int(s.labels.max()) for s in [*fed.sources, fed.target]))
    return cfgmod.build_model_config(cfg, fed.sources[0].features.shape[1], num_classes)


def cmd_run_fal(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    fcfg = cfgmod.build_fed_config(cfg)
    fed = cfgmod.build_federation(cfg)
    mcfg = _model_config(cfg, fed)
    alc = cfgmod.build_al_config(cfg, fed)
    res = run_fal(fcfg, fed, alc, mcfg, threads=cfg["threads"])
    K = len(fed.sources)
    outputs = [out / "cycles.csv", out / "selections.csv", out / "ledger.csv"]
    write_cycles_csv(res.cycles, outputs[0], K)
    write_rows(outputs[1], ["cycle", "client", "index"],
               ((r.cycle, k, int(i)) for r in res.cycles for k, ix in enumerate(r.selection.indices) for i in ix))
    res.ledger.write_csv(outputs[2])
    # projections use each cycle's model and the pools as they stood when it selected
    for r in res.cycles:
        fed_c = pools_before_cycle(res, r.cycle)
        path = out / f"projection_c{r.cycle}.csv"
        write_projection(path, projection_rows(r.global_params, mcfg, fed_c, r.selection))
        outputs.append(path)
        if r.cycle == 1:
            write_projection(out / "projection.csv", projection_rows(r.global_params, mcfg, fed_c, r.selection))
            outputs.append(out / "projection.csv")
    for r in res.cycles:
        print(f"cycle {r.cycle}: labeled={r.labeled_total} budgets={r.budgets} "
              f"target_acc={r.target_acc:.4f} source_acc_mean={r.source_acc_mean:.4f} emd={r.emd:.4f}")
    write_manifest(out, cfg, cfgmod.config_hash(cfg), outputs, {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_emd_eval(cfg: dict) -> int:
    """Train one FDG cycle per seed, then compare selectors by EMD to the top-energy targets."""
    t0 = time.perf_counter()
    out = _out_dir(cfg)
    rows = []
    selectors = [SelectorKind(s) for s in cfg["emd"]["selectors"]]
    base_seed = int(cfg["seed"])
    for seed in range(base_seed, base_seed + int(cfg["emd"]["num_seeds"])):
        scfg = cfgmod.resolve({**cfg, "seed": seed})
        fed = cfgmod.build_federation(scfg)
        mcfg = _model_config(scfg, fed)
        alc = cfgmod.build_al_config(scfg, fed)
        # one training cycle on the initial pools, no labeling
        warmup = AlConfig(1, 0, alc.initial_fraction, SelectorKind.RANDOM)
        res = run_fal(cfgmod.build_fed_config(scfg), fed, warmup, mcfg, threads=scfg["threads"])
        theta, pools = res.cycles[0].global_params, res.federation
        for kind in selectors:
            rows.append((seed, kind.value, _emd_for(kind, theta, pools, alc.budget, mcfg, seed)))
    path = out / "emd.csv"
    write_rows(path, ["seed", "selector", "emd"], rows)
    for kind in selectors:
        vals = [r[2] for r in rows if r[1] == kind.value]
        print(f"{kind.value}: mean emd {np.mean(vals):.4f} over {len(vals)} seeds")
    write_manifest(out, cfg, cfgmod.config_hash(cfg), [path], {"total": time.perf_counter() - t0})
    return EXIT_OK


def _even_split(total: int, k: int) -> list[int]:
    base, rem = divmod(total, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def _emd_for(kind, theta, fed, budget, mcfg, seed) -> float:
    per = _even_split(budget, len(fed.sources))
    if kind is SelectorKind.FEDALV:
        sel = select_fedalv(theta, fed.sources, fed.target, budget, mcfg)
    elif kind is SelectorKind.FEDAL:
        sel = select_fedal(theta, fed.sources, fed.target, budget, mcfg)
    elif kind is SelectorKind.CORESET:
        sel = select_coreset(theta, fed.sources, per, mcfg)
    elif kind is SelectorKind.ENTROPY:
        sel = select_entropy(theta, fed.sources, per, mcfg)
    elif kind is SelectorKind.ENERGY_SOURCE:
        sel = select_energy_source(theta, fed.sources, per, mcfg)
    else:
        sel = select_random(fed.sources, per, make_rng(seed, 77))
    return selection_emd(theta, fed.sources, fed.target, sel, mcfg)


def cmd_verify(loss_fn=None) -> int:
    results = verify.run_all(loss_fn) if loss_fn else verify.run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify()
    try:
        cfg = _load_config(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train-fdg":
        return cmd_train_fdg(cfg, args.all_targets)
    if args.command == "run-fal":
        return cmd_run_fal(cfg)
    if args.command == "emd-eval":
        return cmd_emd_eval(cfg)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
