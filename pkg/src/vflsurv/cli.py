"""Command-line entry point.

Subcommands: gen-data, train, evaluate, attack, accountant, verify-bound.
Exit status 0 on success, 1 on validation errors (bad flags/config), 2 on
runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import threading

import numpy as np

from .attack import AttackConfig, projection_file_content, run_attack_pipeline
from .config import (ConfigError, RunConfig, config_digest, load_config,
                     write_manifest)
from .data import (DataFormatError, Dataset, ModalityDataSpec, CohortSpec,
                   default_cohort_spec, generate_cohort, load_dataset,
                   write_dataset)
from .federation import (PrivacySettings, TrainSettings, evaluate_bundle,
                         run_centralized_training, run_vfl_client_tcp,
                         run_vfl_server_tcp, run_vfl_training)
from .federation.convergence import (ConvergenceToy, report_lines,
                                     verify_convergence_bound)
from .metrics import metrics_report, report_text
from .model import load_checkpoint, save_checkpoint
from .privacy import PrivacyParams, accountant_report, accountant_text
from .rng import NoiseRouter
from .survival import TimeGrid, hazards_to_survival


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is 1
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="vflsurv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=2000)
    g.add_argument("--seed", type=int, default=2024)
    g.add_argument("--censoring", type=float, default=0.3)
    g.add_argument("--preset", choices=("fast", "paper-scale"), default="fast")
    g.add_argument("--missing", default="",
                   help="per-modality missing probability, e.g. mirna=0.1")

    t = sub.add_parser("train", help="train a model (centralized or vfl)")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    t.add_argument("--mode", choices=("centralized", "vfl"))
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--modalities")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--intervals", type=int)
    t.add_argument("--transport", choices=("inproc", "tcp"))
    t.add_argument("--tcp-host")
    t.add_argument("--tcp-port", type=int)
    t.add_argument("--client-index", type=int, default=None,
                   help="run only this client against an external server")
    t.add_argument("--no-spawn-clients", action="store_true",
                   help="tcp server waits for externally launched clients")

    e = sub.add_parser("evaluate", help="compute metrics from a checkpoint")
    e.add_argument("--run", required=True, help="training output directory")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--draws", type=int, default=0,
                   help="posterior draws; 0 = deterministic pass")
    e.add_argument("--seed", type=int, default=2024)

    a = sub.add_parser("attack", help="feature reconstruction attack study")
    a.add_argument("--data", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epsilons", default="0.5,1,1.5,10,inf")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--epochs", type=int, default=8)
    a.add_argument("--batch-size", type=int, default=32)
    a.add_argument("--embed-dim", type=int, default=64)
    a.add_argument("--seed", type=int, default=2024)

    acc = sub.add_parser("accountant", help="print the privacy accounting report")
    acc.add_argument("--epsilon", type=float, required=True)
    acc.add_argument("--delta", type=float, default=1e-5)
    acc.add_argument("--p", type=float, required=True,
                     help="batch sampling probability")
    acc.add_argument("--tau", type=int, required=True,
                     help="training iterations")
    acc.add_argument("--c2", type=float, default=1.0)
    acc.add_argument("--clip", type=float, default=1.0)

    v = sub.add_parser("verify-bound", help="convergence-bound harness")
    v.add_argument("--noise", default="0,0.1,1")
    v.add_argument("--epochs", type=int, default=60)
    v.add_argument("--seeds", type=int, default=200)
    v.add_argument("--samples", type=int, default=50)
    v.add_argument("--clients", type=int, default=3)
    return parser


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

def _infer_modality_specs(path: str, names) -> list[ModalityDataSpec]:
    """Dataset files carry no kind metadata: the 'clinical' modality is the
    tabular one (categorical columns then one continuous); everything else
    is dense."""
    if not names:
        names = sorted(f[:-4] for f in os.listdir(path)
                       if f.endswith(".csv") and f != "labels.csv")
    specs = []
    for name in names:
        if name == "clinical":
            with open(os.path.join(path, f"{name}.csv")) as fh:
                header = fh.readline().strip().split(",")
            width = len(header) - 1
            mat = np.loadtxt(os.path.join(path, f"{name}.csv"), delimiter=",",
                             skiprows=1, usecols=range(1, width + 1), ndmin=2)
            vocab = tuple(int(mat[:, j].max()) + 1 for j in range(width - 1))
            specs.append(ModalityDataSpec(name, kind="clinical",
                                          vocab_sizes=vocab, continuous=1))
        else:
            specs.append(ModalityDataSpec(name, kind="dense"))
    return specs


def _load(cfg: RunConfig) -> Dataset:
    if not cfg.data_path:
        raise ConfigError("data.path: required")
    specs = _infer_modality_specs(cfg.data_path, cfg.modalities)
    return load_dataset(cfg.data_path, specs, top_variance=cfg.top_variance)


def _settings(cfg: RunConfig) -> TrainSettings:
    privacy = None
    if cfg.privacy_enabled:
        privacy = PrivacySettings(epsilon=cfg.epsilon, delta=cfg.delta,
                                  clip_bound=cfg.clip_bound, c2=cfg.c2)
    overrides = {"embed_dim": cfg.embed_dim,
                 "cat_embed_dim": cfg.cat_embed_dim,
                 "head_hidden_layers": cfg.head_hidden_layers,
                 "head_hidden_width": cfg.head_hidden_width,
                 "dropout": cfg.dropout}
    return TrainSettings(epochs=cfg.epochs, batch_size=cfg.batch_size,
                         learning_rate=cfg.resolved_learning_rate(),
                         weight_decay=cfg.weight_decay,
                         master_seed=cfg.seed, intervals=cfg.intervals,
                         privacy=privacy, bayesian=cfg.bayesian,
                         early_stopping_patience=cfg.patience,
                         model_overrides=overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    if args.preset == "paper-scale":
        mods = [ModalityDataSpec("clinical", kind="clinical"),
                ModalityDataSpec("mirna", kind="dense", width=1881),
                ModalityDataSpec("dnam", kind="dense", width=3774)]
        spec = CohortSpec(n_subjects=args.subjects, modalities=tuple(mods),
                          censoring_fraction=args.censoring,
                          master_seed=args.seed)
    else:
        spec = default_cohort_spec(n_subjects=args.subjects,
                                   master_seed=args.seed,
                                   censoring_fraction=args.censoring)
    if args.missing:
        probs = {}
        for part in args.missing.split(","):
            name, _, value = part.partition("=")
            probs[name.strip()] = float(value)
        mods = tuple(
            ModalityDataSpec(m.name, kind=m.kind, width=m.width,
                             vocab_sizes=m.vocab_sizes, continuous=m.continuous,
                             signal_weight=m.signal_weight,
                             missing_prob=probs.get(m.name, m.missing_prob))
            for m in spec.modalities)
        spec = CohortSpec(n_subjects=spec.n_subjects, modalities=mods,
                          latent_dim=spec.latent_dim,
                          censoring_fraction=spec.censoring_fraction,
                          master_seed=spec.master_seed)
    dataset = generate_cohort(spec)
    write_dataset(dataset, args.out)
    events = int(dataset.events.sum())
    print(f"wrote {dataset.ids.size} subjects ({events} events) to {args.out}")
    return 0


def _config_from_train_args(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    flag_map = {"mode": args.mode, "data.path": args.data, "output": args.out,
                "data.modalities": args.modalities,
                "train.epochs": args.epochs,
                "train.batch_size": args.batch_size,
                "train.learning_rate": args.lr,
                "seed": args.seed, "grid.intervals": args.intervals,
                "transport": args.transport, "tcp.host": args.tcp_host,
                "tcp.port": args.tcp_port}
    if args.epsilon is not None:
        flag_map["privacy.enabled"] = True
        flag_map["privacy.epsilon"] = args.epsilon
    if args.no_spawn_clients:
        flag_map["tcp.spawn_clients"] = False
    for key, value in flag_map.items():
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _cmd_train(args) -> int:
    cfg = _config_from_train_args(args)
    dataset = _load(cfg)
    settings = _settings(cfg)
    digest = config_digest(cfg)

    if cfg.mode == "vfl" and cfg.transport == "tcp" and args.client_index is not None:
        run_vfl_client_tcp(dataset, settings, args.client_index, cfg.tcp_host,
                           cfg.tcp_port, digest)
        print(f"client {args.client_index} finished")
        return 0

    if cfg.mode == "centralized":
        result = run_centralized_training(dataset, settings)
    elif cfg.transport == "inproc":
        result = run_vfl_training(dataset, settings)
    else:
        threads = []
        if cfg.spawn_clients:
            n_clients = len(dataset.modalities if not cfg.modalities
                            else cfg.modalities)
            for k in range(n_clients):
                th = threading.Thread(
                    target=run_vfl_client_tcp,
                    args=(dataset, settings, k, cfg.tcp_host, cfg.tcp_port,
                          digest),
                    daemon=True)
                threads.append(th)
        server_holder = {}

        def serve():
            server_holder["result"] = run_vfl_server_tcp(
                dataset, settings, cfg.tcp_host, cfg.tcp_port, digest)

        server_thread = threading.Thread(target=serve)
        server_thread.start()
        import time
        time.sleep(0.3)
        for th in threads:
            th.start()
        server_thread.join()
        for th in threads:
            th.join(timeout=30)
        if "result" not in server_holder:
            raise RuntimeError("tcp training did not produce a result")
        result = server_holder["result"]

    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "history.tsv"), "w") as fh:
        fh.write(result.history_tsv())
    save_checkpoint(os.path.join(cfg.output, "checkpoint.bvfl"), result.bundle,
                    extra={"grid/t_max": np.array(result.grid.t_max)})
    write_manifest(os.path.join(cfg.output, "manifest.txt"), cfg,
                   extra=result.resolved)
    if result.privacy is not None:
        rep = accountant_report(result.privacy)
        with open(os.path.join(cfg.output, "accountant.txt"), "w") as fh:
            fh.write(accountant_text(rep))
    last = result.history[-1]
    print(f"trained {cfg.mode} for {len(result.history)} epochs; "
          f"final val_loss {last['val_loss']:.4f}, "
          f"val_cindex {last['val_cindex']:.4f}")
    print(f"outputs in {cfg.output}")
    return 0


def _posterior_survival(bundle, dataset, positions, draws, seed):
    curves = None
    for d in range(draws):
        router = NoiseRouter(seed, ("posterior", d))
        embs = [bundle.extractor_forward(name,
                                         dataset.modalities[name][positions],
                                         "sample", router, False)
                for name in bundle.modality_names()]
        hazards, _, _ = bundle.fuse_and_predict(embs, "sample", router, False)
        surv = hazards_to_survival(hazards.data)
        curves = surv if curves is None else curves + surv
    return curves / draws


def _cmd_evaluate(args) -> int:
    ckpt = os.path.join(args.run, "checkpoint.bvfl")
    bundle, extra = load_checkpoint(ckpt)
    if "grid/t_max" not in extra:
        raise ConfigError("checkpoint: missing grid/t_max entry")
    grid = TimeGrid(intervals=bundle.cfg.intervals,
                    t_max=float(extra["grid/t_max"]))
    specs = _infer_modality_specs(args.data, tuple(bundle.modality_names()))
    dataset = load_dataset(args.data, specs)
    positions = np.where(dataset.split == args.split)[0]
    if positions.size == 0:
        raise ConfigError(f"--split: no subjects tagged {args.split!r}")
    if args.draws > 0:
        surv = _posterior_survival(bundle, dataset, positions, args.draws,
                                   args.seed)
    else:
        _, _, hazards = evaluate_bundle(bundle, dataset, grid, positions,
                                        args.seed, ("evaluate", args.split))
        surv = hazards_to_survival(hazards)
    report = metrics_report(surv, dataset.times[positions],
                            dataset.events[positions], grid)
    text = report_text(report)
    print(text, end="")
    with open(os.path.join(args.run, f"metrics_{args.split}.txt"), "w") as fh:
        fh.write(text)
    manifest = os.path.join(args.run, "manifest.txt")
    if os.path.exists(manifest):
        with open(manifest, "a") as fh:
            for key, value in report.items():
                fh.write(f"metrics.{args.split}.{key} = {value}\n")
    return 0


def _cmd_attack(args) -> int:
    specs = _infer_modality_specs(args.data, ())
    dataset = load_dataset(args.data, specs)
    if args.target not in dataset.modalities:
        raise ConfigError(f"--target: unknown modality {args.target!r}")
    epsilons = []
    for part in args.epsilons.split(","):
        part = part.strip()
        epsilons.append(None if part in ("inf", "none") else float(part))
    cfg = AttackConfig(target=args.target)
    os.makedirs(args.out, exist_ok=True)
    lines = ["seed\tbudget\tmse\tsilhouette"]
    for s in range(args.seeds):
        settings = TrainSettings(
            epochs=args.epochs, batch_size=args.batch_size,
            learning_rate=0.005, master_seed=args.seed + s,
            intervals=10,
            model_overrides={"embed_dim": args.embed_dim,
                             "head_hidden_layers": 1,
                             "head_hidden_width": args.embed_dim})
        rep = run_attack_pipeline(dataset, cfg, settings, epsilons, args.seed + s)
        for key, entry in rep["by_budget"].items():
            lines.append(f"{s}\t{key}\t{entry['mse']:.6g}"
                         f"\t{entry['silhouette']:.6g}")
            proj = projection_file_content(entry["projection"],
                                           entry["projection_labels"])
            with open(os.path.join(args.out,
                                   f"projection_seed{s}_eps{key}.tsv"),
                      "w") as fh:
                fh.write(proj)
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "attack_report.tsv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _cmd_accountant(args) -> int:
    params = PrivacyParams(epsilon=args.epsilon, delta=args.delta,
                           sample_rate=args.p, steps=args.tau,
                           clip_bound=args.clip, c2=args.c2)
    print(accountant_text(accountant_report(params)), end="")
    return 0


def _cmd_verify_bound(args) -> int:
    sigmas = [float(s) for s in args.noise.split(",")]
    all_passed = True
    for sigma in sigmas:
        toy = ConvergenceToy(eigenvalues=(0.5, 0.7, 0.85, 1.0),
                             clients=args.clients, noise_std=sigma,
                             epochs=args.epochs, n_samples=args.samples)
        report = verify_convergence_bound(toy, seeds=range(args.seeds))
        print(report_lines(report), end="")
        print()
        all_passed = all_passed and report["passed"]
    if not all_passed:
        print("bound check FAILED")
        return 2
    print("bound check passed")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "attack": _cmd_attack,
    "accountant": _cmd_accountant,
    "verify-bound": _cmd_verify_bound,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
