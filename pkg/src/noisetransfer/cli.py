"""Command-line entry point: ``noisetransfer <subcommand> [options]``.

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures (missing or inconsistent inputs, diverged training, failed checks).
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from noisetransfer import experiments as ex
from noisetransfer.errors import ConfigError, NoiseTransferError
from noisetransfer.model import load_ensemble, save_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

THEORY_COLUMNS = ["example_id", "K", "M", "sigma", "kind", "f_hat_mse", "f_bar_mse", "margin",
                  "assumption_gap", "min_rho", "max_rho", "cs_ok"]


class CheckFailed(NoiseTransferError):
    pass


def _cell(v):
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _ensemble_digest(directory):
    h = hashlib.sha256()
    for f in sorted(Path(directory).glob("*.json")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out, command, exp, outputs, inputs=None):
    """Echo the resolved config; inputs are identified by content hash, not path."""
    manifest = {"command": command, "config": exp.config, "inputs": inputs or {}, "outputs": sorted(outputs)}
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class Context:
    def __init__(self, args, exp):
        self.args = args
        self.exp = exp
        self.out = Path(args.out or exp.section("eval")["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)

    def say(self, msg):
        if not self.args.quiet:
            print(msg)

    def ensemble_dir(self):
        return Path(self.args.ensemble) if self.args.ensemble else self.out / "ensemble"

    def load_ensemble(self, dataset):
        path = self.ensemble_dir()
        ens = load_ensemble(path)
        ex.check_compatible(ens, dataset)
        return ens, {"ensemble": _ensemble_digest(path)}


def cmd_train_ensemble(ctx):
    exp = ctx.exp
    train_set, test_set = ex.build_data(exp)
    ens = ex.build_ensemble(exp, train_set)
    save_ensemble(ens, ctx.ensemble_dir())
    rows = ex.train_summary(ens, train_set, test_set)
    write_csv(ctx.out / "train_summary.csv", rows, ["member", "seed", "train_accuracy", "test_accuracy"])
    outputs = ["train_summary.csv"]
    if ctx.args.figures:
        from noisetransfer import report
        report.plot_train(rows, ctx.out / "train_summary.png")
        outputs.append("train_summary.png")
    write_manifest(ctx.out, "train-ensemble", exp, outputs)
    ctx.say(f"trained {len(ens)} members into {ctx.ensemble_dir()}; "
            f"min test accuracy {min(r['test_accuracy'] for r in rows):.4f}")


def cmd_attack(ctx):
    exp = ctx.exp
    _, test_set = ex.build_data(exp)
    ens, inputs = ctx.load_ensemble(test_set)
    examples = ex.attack_examples(exp, test_set)
    adv = ex.run_attacks(exp, ens, examples)
    np.save(ctx.out / "adv_examples.npy", adv)
    rows = ex.attack_rows(ens, examples, adv)
    write_csv(ctx.out / "attack.csv", rows,
              ["method", "source", "example_id", "label", "loss_before", "loss_after", "linf", "fooled"])
    write_manifest(ctx.out, "attack", exp, ["adv_examples.npy", "attack.csv"], inputs)
    for method in ex.METHODS:
        sel = [r for r in rows if r["method"] == method]
        ctx.say(f"{method}: source fooling rate {np.mean([r['fooled'] for r in sel]):.4f}, "
                f"max linf {max(r['linf'] for r in sel):.6g}")


def cmd_eval_transfer(ctx):
    exp = ctx.exp
    _, test_set = ex.build_data(exp)
    ens, inputs = ctx.load_ensemble(test_set)
    adv_path = Path(ctx.args.adv) if ctx.args.adv else ctx.out / "adv_examples.npy"
    adv = np.load(adv_path)
    inputs["adv"] = _sha256(adv_path)
    rows = ex.transfer_rows(ens, ex.attack_examples(exp, test_set), adv)
    write_csv(ctx.out / "transfer.csv", rows, ["method", "source", "transfer_rate", "num_targets", "min_correct"])
    s = ex.transfer_summary(rows)
    verdict = (f"transfer rate baseline {s['baseline']:.4f}, noise {s['noise']:.4f}, "
               f"improvement {s['improvement']:+.4f}")
    (ctx.out / "transfer_verdict.txt").write_text(verdict + "\n")
    outputs = ["transfer.csv", "transfer_verdict.txt"]
    if ctx.args.figures:
        from noisetransfer import report
        report.plot_transfer(rows, ctx.out / "transfer.png")
        outputs.append("transfer.png")
    write_manifest(ctx.out, "eval-transfer", exp, outputs, inputs)
    ctx.say(verdict)


def cmd_verify_theory(ctx):
    exp = ctx.exp
    _, test_set = ex.build_data(exp)
    ens, inputs = ctx.load_ensemble(test_set)
    rows = ex.theory_rows(exp, ens, ex.eval_points(exp, ens, test_set))
    write_csv(ctx.out / "theory.csv", rows, THEORY_COLUMNS)
    verdict = ex.theory_verdict(ex.theory_summary(rows))
    (ctx.out / "verdict.txt").write_text(verdict + "\n")
    outputs = ["theory.csv", "verdict.txt"]
    if ctx.args.figures:
        from noisetransfer import report
        report.plot_theory(rows, ctx.out / "theory.png")
        outputs.append("theory.png")
    write_manifest(ctx.out, "verify-theory", exp, outputs, inputs)
    ctx.say(verdict)


def cmd_gradcheck(ctx):
    exp = ctx.exp
    rows = ex.gradcheck_rows(exp)
    write_csv(ctx.out / "gradcheck.csv", rows, ["trial", "layer_dims", "activation", "rel_error", "passed"])
    outputs = ["gradcheck.csv"]
    if ctx.args.figures:
        from noisetransfer import report
        report.plot_gradcheck(rows, ctx.out / "gradcheck.png", exp.section("gradcheck")["tol"])
        outputs.append("gradcheck.png")
    write_manifest(ctx.out, "gradcheck", exp, outputs)
    passed = sum(r["passed"] for r in rows)
    ctx.say(f"gradcheck {passed}/{len(rows)} passed; max relative error {max(r['rel_error'] for r in rows):.3g}")
    if passed != len(rows):
        raise CheckFailed(f"{len(rows) - passed} gradient checks exceeded tolerance")


COMMANDS = {
    "train-ensemble": cmd_train_ensemble,
    "attack": cmd_attack,
    "eval-transfer": cmd_eval_transfer,
    "verify-theory": cmd_verify_theory,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (default: eval.output_dir)")
    common.add_argument("--seed", type=int, help="master seed; overrides every seed in the config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    common.add_argument("--figures", action="store_true", help="also render PNG figures")

    parser = argparse.ArgumentParser(prog="noisetransfer",
                                     description="Noise-averaged transfer attacks on MLP ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-ensemble", parents=[common], help="train K seed-varied MLPs")
    for name, text in (("attack", "craft baseline and noise-averaged PGD examples from every member"),
                       ("verify-theory", "per-point MSE statistics and inequality verdict")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ensemble", help="ensemble directory (default: OUT/ensemble)")
    p = sub.add_parser("eval-transfer", parents=[common], help="leave-one-source-out transfer rates")
    p.add_argument("--ensemble", help="ensemble directory (default: OUT/ensemble)")
    p.add_argument("--adv", help="adversarial examples file (default: OUT/adv_examples.npy)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of input gradients")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.ensemble = getattr(args, "ensemble", None)
    args.adv = getattr(args, "adv", None)
    try:
        exp = ex.load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](Context(args, exp))
    except (NoiseTransferError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
