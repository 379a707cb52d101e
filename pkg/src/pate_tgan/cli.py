"""Command-line entry point: ``pate-tgan <subcommand>``."""

import argparse
import csv
import dataclasses
import datetime
import io
import json
import logging
import os
import sys


from . import __version__, _kernels
from . import accountant as acct
from .aggregation import HyGnmaxConfig, simulate
from .data import DataFormatError, load_csv, load_idx, save_csv, synth_mixture
from .evaluation import evaluate, generate_dataset
from .nn import load_checkpoint, save_checkpoint, to_record
from .trainer import METRIC_FIELDS, ConfigError, TrainConfig, Trainer, parse_config_text

log = logging.getLogger("pate_tgan")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------ accountant


def cmd_accountant(args, parser):
    dpsgd_flags = {"--nc": args.nc, "--nd": args.nd, "--noise-multiplier": args.noise_multiplier,
                   "--ng": args.ng, "--sigma2": args.sigma2, "--steps": args.steps}
    given = [k for k, v in dpsgd_flags.items() if v is not None]
    mu_c = mu_g = None
    if given:
        missing = [k for k, v in dpsgd_flags.items() if v is None]
        if missing:
            parser.error(f"budget mode needs all of {', '.join(dpsgd_flags)}; missing {', '.join(missing)}")
        mu = acct.total_mu(args.nc, args.nd, args.noise_multiplier, args.ng, args.sigma2, args.steps).mu
        mu_c, mu_g = acct.breakdown(args.nc, args.nd, args.noise_multiplier, args.ng, args.sigma2, args.steps)
    elif args.mu is not None:
        mu = args.mu
    elif args.epsilon is not None and args.delta is not None:
        mu = acct.epsilon_to_mu(args.epsilon, args.delta)
    else:
        parser.error("give --mu, or --epsilon with --delta, or the full budget flags (--nc --nd ...)")

    epsilon, delta = args.epsilon, args.delta
    if mu_c is None and args.mu is None:
        pass  # mu was derived from the given (epsilon, delta)
    elif epsilon is not None:
        delta = acct.mu_to_delta(mu, epsilon)
    else:
        delta = delta if delta is not None else 1e-5
        epsilon = acct.mu_to_epsilon(mu, delta)

    print(f"mu={mu:.6g} epsilon={epsilon:.6g} delta={delta:.6g}")
    record = {"mu": mu, "epsilon": epsilon, "delta": delta, "breakdown": {"mu_c": mu_c, "mu_g": mu_g}}
    print(json.dumps(record))
    return 0


# ------------------------------------------------------------------ aggregate-sim


def cmd_aggregate_sim(args, parser):
    try:
        real, fake = (int(v) for v in args.votes.split(","))
    except ValueError:
        parser.error(f"--votes expects R,F integers, got {args.votes!r}")
    sigma1 = args.sigma1 if args.sigma1 is not None else args.sigma2
    cfg = HyGnmaxConfig(args.te, sigma1, args.sigma2, max(real + fake, 1))
    pass_rate, p_real = simulate(real, fake, cfg, args.draws, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["votes", "pass_rate", "p_real"])
    w.writerow([f"{real},{fake}", f"{pass_rate:.6f}", f"{p_real:.6f}"])
    sys.stdout.write(buf.getvalue())
    return 0


# ------------------------------------------------------------------ synth-data


def cmd_synth_data(args, parser):
    ds = synth_mixture(args.m, args.n, args.d, args.sep, args.seed)
    save_csv(args.out, ds)
    print(json.dumps({"rows": len(ds), "classes": args.m, "dim": args.d, "out": args.out}))
    return 0


# ------------------------------------------------------------------ train


def _config_flag(name):
    return "--" + name.replace("_", "-")


def _load_dataset(args):
    if args.data:
        return load_csv(args.data)
    if args.idx_images:
        return load_idx(args.idx_images, args.idx_labels)
    raise ConfigError("train needs --data CSV or --idx-images/--idx-labels")


def cmd_train(args, parser):
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(parse_config_text(fh.read()))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name)
        if v is not None:
            values[f.name] = v
    if args.epsilon is not None:
        delta = values.get("dp_delta", TrainConfig.dp_delta)
        values["mu_cap"] = acct.epsilon_to_mu(args.epsilon, delta)
    ds = _load_dataset(args)
    if "classes" not in values:
        values["classes"] = ds.n_classes
    cfg = TrainConfig(**values)

    from .data import split

    s_l, s_d = split(ds, cfg.percent, cfg.seed, min_labeled=cfg.k)
    trainer = Trainer(cfg, s_l, s_d)

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    gen_path = os.path.join(args.out, "generator.json")
    manifest_path = os.path.join(args.out, "manifest.json")
    full_path = os.path.join(args.out, "full_state.json") if args.unsafe_full_checkpoint else None

    started = _now()
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)

        def on_round(m):
            w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
            log.info("round %d mu=%.4f eps=%.3f", m.round, m.mu_spent, m.epsilon)

        report = trainer.run(max_rounds=args.max_rounds, on_round=on_round)

    outputs = {"metrics": metrics_path, "generator": gen_path}
    if full_path:
        outputs["full_state"] = full_path
    manifest = {
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "code_version": __version__,
        "backend": _kernels.backend(),
        "data": args.data or args.idx_images,
        "started": started,
        "finished": _now(),
        "rounds": report.rounds,
        "mu_spent": report.mu_spent,
        "mu_cap": cfg.mu_cap,
        "epsilon": report.epsilon,
        "dp_delta": cfg.dp_delta,
        "outputs": outputs,
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    save_checkpoint(gen_path, trainer.generator)
    if full_path:
        state = {
            "generator": to_record(trainer.generator),
            "classifier": to_record(trainer.classifier),
            "student": to_record(trainer.student),
            "teachers": [to_record(t) for t in trainer.ensemble.teachers],
        }
        with open(full_path, "w") as fh:
            json.dump(state, fh)
    print(json.dumps({"rounds": report.rounds, "mu_spent": report.mu_spent, "epsilon": report.epsilon,
                      "manifest": manifest_path}))
    return 0


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(args, parser):
    gen = load_checkpoint(args.checkpoint)
    if "n_classes" not in gen.meta:
        raise ConfigError(f"{args.checkpoint}: checkpoint lacks generator metadata (n_classes, noise_dim)")
    test = load_csv(args.test_data)
    synth = generate_dataset(gen, args.n, args.seed, stratified=args.stratified)
    report = evaluate(synth, test, epochs=args.epochs, seed=args.seed, repeats=args.repeats,
                      n_classes=int(gen.meta["n_classes"]))
    rec = report.to_dict()
    print(json.dumps(rec))
    if args.csv_out:
        new = not os.path.exists(args.csv_out)
        with open(args.csv_out, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["checkpoint", "accuracy", "auroc_macro", "n_synthetic", "n_test", "repeats", "seed"])
            w.writerow([args.checkpoint, rec["accuracy"], rec["auroc_macro"], rec["n_synthetic"], rec["n_test"],
                        rec["repeats"], rec["seed"]])
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="pate-tgan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("accountant", help="Gaussian-DP budget and (epsilon, delta) conversion")
    a.add_argument("--mu", type=float)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--delta", type=float)
    a.add_argument("--nc", type=int, help="DPSGD batch size")
    a.add_argument("--nd", type=int, help="size of the dataset DPSGD samples from")
    a.add_argument("--noise-multiplier", type=float)
    a.add_argument("--ng", type=int, help="generator queries per student step")
    a.add_argument("--sigma2", type=float)
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_accountant)

    g = sub.add_parser("aggregate-sim", help="Monte Carlo of the confident noisy argmax")
    g.add_argument("--votes", required=True, help="R,F vote counts")
    g.add_argument("--te", type=float, required=True, help="threshold")
    g.add_argument("--sigma1", type=float, help="gate noise std (default: sigma2)")
    g.add_argument("--sigma2", type=float, required=True)
    g.add_argument("--draws", type=int, default=100000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_aggregate_sim)

    s = sub.add_parser("synth-data", help="write a Gaussian mixture CSV")
    s.add_argument("--m", type=int, required=True, help="classes")
    s.add_argument("--n", type=int, required=True, help="rows per class")
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--sep", type=float, default=6.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train until the privacy budget is spent")
    t.add_argument("--config", help="key = value file with TrainConfig fields")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--data", help="CSV dataset (label first)")
    t.add_argument("--idx-images")
    t.add_argument("--idx-labels")
    t.add_argument("--epsilon", type=float, help="set mu-cap from this epsilon at dp-delta")
    t.add_argument("--max-rounds", type=int)
    t.add_argument("--unsafe-full-checkpoint", action="store_true",
                   help="also write classifier, student and teachers (not privacy-protected)")
    for name, typ in TrainConfig.field_types().items():
        if typ is bool:
            t.add_argument(_config_flag(name), dest="cfg_" + name, type=_parse_bool, metavar="BOOL")
        else:
            t.add_argument(_config_flag(name), dest="cfg_" + name, type=typ)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="train an evaluator on generated data, test on real data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-data", required=True)
    e.add_argument("--n", type=int, default=20000)
    e.add_argument("--epochs", type=int, default=10)
    e.add_argument("--repeats", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--stratified", action="store_true")
    e.add_argument("--csv-out", help="append a result row to this CSV")
    e.set_defaults(func=cmd_evaluate)
    return p


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, parser)
    except (OSError, DataFormatError, ConfigError, ValueError, OverflowError) as exc:
        print(f"pate-tgan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
