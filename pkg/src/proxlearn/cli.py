"""``proxlearn`` command-line interface.

Every subcommand writes into one output directory, together with
``config.json`` (the fully resolved settings) and ``manifest.json`` (sha256
of each file written). ``--config file.json`` supplies defaults for any
flag; flags given on the command line win. ``PROXLEARN_SEED`` overrides
every seed.

Exit status: 0 on success, 1 when a run fails or an internal check does
not pass, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, admm_run
from .experiments import (
    SweepConfig,
    TrainTemplate,
    convergence_trace,
    default_v_grid,
    preset,
    run_ktest_stability,
    run_noise_sweep,
    run_scale_once,
    snr_improvement,
)
from .learning import CONSTRAINED, UNCONSTRAINED, TrainConfig, train
from .signals import LevyModel, SignalBatch, make_batch
from .splines import ScaledShrinkage, ShrinkageSpline, check_firmly_nonexpansive, recover_penalty

log = logging.getLogger("proxlearn")

SEED_ENV = "PROXLEARN_SEED"

PRESETS = ("desk", "desk-brownian", "paper-fig2", "paper-fig3", "desk-fig6", "paper-fig6",
           "fig7", "fig9")


class CheckFailed(RuntimeError):
    """An output was written but failed its validity check."""


class Outputs:
    """Tracks files written under one directory and emits the manifest."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name) -> Path:
        p = Path(name)
        p = p if p.is_absolute() else self.dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, p: Path) -> Path:
        if p not in self.files:
            self.files.append(p)
        return p

    def write_json(self, name, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return self.record(p)

    def finish(self, config: dict) -> None:
        self.write_json("config.json", config)
        manifest = self.dir / "manifest.json"
        # keep files from earlier runs into the same directory
        if manifest.exists():
            try:
                earlier = json.loads(manifest.read_text()).get("files", {})
            except ValueError:
                earlier = {}
            for key in earlier:
                p = Path(key) if Path(key).is_absolute() else self.dir / key
                if p.exists():
                    self.record(p)
        entries = {}
        for f in self.files:
            try:
                key = str(f.relative_to(self.dir))
            except ValueError:
                key = str(f)
            entries[key] = hashlib.sha256(f.read_bytes()).hexdigest()
        (self.dir / "manifest.json").write_text(json.dumps({"files": entries}, indent=1, sort_keys=True) + "\n")


def _seed(value):
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else value


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _model_from(args) -> LevyModel:
    if args.model == "brownian":
        return LevyModel.brownian()
    return LevyModel.compound_poisson(args.poisson_rate)


def _out_dir(args, default: str) -> Path:
    """Output directory; without ``--out-dir`` it is the directory of ``--out``."""
    if args.out_dir:
        return Path(args.out_dir)
    if getattr(args, "out", None):
        out = Path(args.out)
        args.out = out.name
        return out.parent
    return Path(default)


def _admm(args) -> AdmmConfig:
    return AdmmConfig(args.mu, args.K)


def _load_spline(path) -> ShrinkageSpline:
    return ShrinkageSpline.load(path)


def cmd_generate(args, out: Outputs) -> dict:
    seed = _seed(args.seed)
    batch = make_batch(_model_from(args), args.n, args.count, args.sigma2, seed)
    p = out.path(args.out)
    batch.save(p)
    out.record(p)
    return {"model": _model_from(args).to_dict(), "n": args.n, "count": args.count,
            "sigma2": args.sigma2, "seed": seed, "out": str(p)}


def cmd_train(args, out: Outputs) -> dict:
    batch = SignalBatch.load(args.batch)
    seed = _seed(args.seed)
    cfg = TrainConfig(batch, gamma=args.gamma, outer_iterations=args.iters, admm=_admm(args),
                      mode=args.mode, delta=args.delta, m_half=args.m_half,
                      kernel_order=args.kernel_order, seed=seed)

    def progress(i, _c):
        if log.isEnabledFor(logging.INFO) and (i + 1) % 100 == 0:
            log.info("iteration %d / %d", i + 1, args.iters)

    res = train(cfg, progress)
    p = out.path(args.out)
    res.spline.save(p)
    out.record(p)
    out.write_json(p.with_suffix(".report.json").name, res.report())
    ok = True
    if args.mode == CONSTRAINED:
        ok = check_firmly_nonexpansive(res.spline).ok
    if not ok:
        raise CheckFailed("trained spline is not firmly nonexpansive")
    return {**cfg.echo(), "batch": str(args.batch), "out": str(p),
            "spline_sha256": res.spline.digest(), "final_loss": res.loss_history[-1]}


def _shrink_for(spline: ShrinkageSpline, lam):
    if lam is None:
        return spline
    if spline.training_meta.get("constrained") is False:
        raise CheckFailed("refusing to scale an unconstrained spline: the scaling rule only holds "
                          "for firmly nonexpansive (constrained) shrinkage functions")
    rep = check_firmly_nonexpansive(spline)
    if not rep.ok:
        raise CheckFailed("refusing to scale a spline that is not firmly nonexpansive: "
                          + "; ".join(rep.messages))
    return ScaledShrinkage(spline, lam)


def _denoise_outputs(shrink, batch: SignalBatch, admm: AdmmConfig) -> dict:
    xh = admm_run(batch.noisy, shrink, admm).x_final
    return {"x_hat": xh.T.tolist(),
            "delta_snr_db": np.atleast_1d(snr_improvement(batch.clean, xh, batch.noisy)).tolist()}


def cmd_denoise(args, out: Outputs) -> dict:
    spline = _load_spline(args.spline)
    batch = SignalBatch.load(getattr(args, "in"))
    result = _denoise_outputs(_shrink_for(spline, args.scale_lambda), batch, _admm(args))
    result.update(spline_sha256=spline.digest(), K=args.K, mu=args.mu, scale_lambda=args.scale_lambda)
    p = out.write_json(args.out, result)
    log.info("mean delta SNR %.3f dB", float(np.mean(result["delta_snr_db"])))
    return {"spline": str(args.spline), "in": str(getattr(args, "in")), "out": str(p),
            "K": args.K, "mu": args.mu, "scale_lambda": args.scale_lambda,
            "mean_delta_snr_db": float(np.mean(result["delta_snr_db"]))}


def cmd_scale(args, out: Outputs) -> dict:
    spline = _load_spline(args.spline)
    shrink = _shrink_for(spline, args.lam)
    trained = spline.trained_sigma2
    config = {"base_spline": str(args.spline), "base_spline_sha256": spline.digest(),
              "lambda": args.lam, "trained_sigma2": trained,
              "target_sigma2": None if trained is None else trained * args.lam,
              "K": args.K, "mu": args.mu}
    out.write_json("scaled_config.json", config)
    v = default_v_grid(spline, args.points)
    curve = np.column_stack([v, shrink(v)])
    p = out.path("scaled_shrinkage.csv")
    np.savetxt(p, curve, delimiter=",", header="v,T", comments="", fmt="%.17g")
    out.record(p)
    if getattr(args, "in", None):
        batch = SignalBatch.load(getattr(args, "in"))
        res = _denoise_outputs(shrink, batch, _admm(args))
        out.write_json(args.out or "scaled_denoise.json", res)
        config["mean_delta_snr_db"] = float(np.mean(res["delta_snr_db"]))
    return config


def cmd_penalty(args, out: Outputs) -> dict:
    spline = _load_spline(args.spline)
    rep = check_firmly_nonexpansive(spline)
    if not rep.ok:
        raise CheckFailed("spline is not firmly nonexpansive, so it has no convex penalty: "
                          + "; ".join(rep.messages))
    curve = recover_penalty(spline, default_v_grid(spline, args.points))
    p = out.path(args.out)
    curve.to_csv(p)
    out.record(p)
    sym = curve.symmetry_error()
    convex = curve.is_convex()
    info = {"spline": str(args.spline), "out": str(p), "points": args.points,
            "symmetry_error": sym, "convex": convex}
    if not convex or (spline.mode == "antisymmetric" and sym >= 1e-6):
        raise CheckFailed(f"recovered penalty failed its checks: convex={convex}, symmetry error {sym:.2e}")
    return info


def _sweep_config(args) -> SweepConfig:
    seed = _seed(args.seed)
    name = args.preset
    tmpl = TrainTemplate(gamma=args.gamma, iterations=args.iters, K=args.K, mu=args.mu)
    model = LevyModel.brownian() if name in ("desk-brownian", "paper-fig2") else LevyModel.compound_poisson(args.poisson_rate)
    base = preset("paper" if name.startswith("paper") else "desk", model, seed)
    changes = {"train": tmpl}
    if args.train_count:
        changes["train_count"] = args.train_count
    if args.test_count:
        changes["test_count"] = args.test_count
    if args.sigma2:
        changes["sigma2_values"] = tuple(args.sigma2)
    return SweepConfig(**{**base.__dict__, **changes})


def cmd_evaluate(args, out: Outputs) -> dict:
    cfg = _sweep_config(args)
    name = args.preset
    resolved = {"preset": name, "sweep": cfg.to_dict(), "threads": args.threads}
    if name in ("fig9",):
        res = run_ktest_stability(model=cfg.model, train_count=cfg.train_count,
                                  test_count=cfg.test_count, seed=cfg.seed,
                                  template=TrainTemplate(args.gamma, args.iters, 2, args.mu))
        out.write_json("ktest.json", res.to_dict())
        p = out.path("ktest.csv")
        res.to_csv(p)
        out.record(p)
        resolved["cadmm_variation_20_50_db"] = res.variation("CADMM", 20, 50)
        return resolved
    if name == "fig7":
        b = make_batch(cfg.model, cfg.n, cfg.train_count, 1.0, cfg.cell_seeds(0)[0])
        spline = train(cfg.train.config(b, CONSTRAINED)).spline
        spline.save(out.path("spline.json"))
        out.record(out.path("spline.json"))
        test = make_batch(cfg.model, cfg.n, 1, 1.0, cfg.cell_seeds(0)[1])
        cost = convergence_trace(spline, test.noisy[:, 0], iters=50, mu=args.mu)
        p = out.path("convergence.csv")
        np.savetxt(p, np.column_stack([np.arange(1, cost.size + 1), cost]), delimiter=",",
                   header="iteration,cost", comments="", fmt="%.17g")
        out.record(p)
        return resolved
    if name.endswith("fig6"):
        report = run_scale_once(cfg)
    else:
        report = run_noise_sweep(cfg, threads=args.threads)
    out.write_json("report.json", report.to_dict())
    p = out.path("report.csv")
    report.to_csv(p)
    out.record(p)
    for key, spl in report.splines.items():
        sp = out.path(Path("splines") / (key.replace("@", "_sigma2_") + ".json"))
        spl.save(sp)
        out.record(sp)
    print(report.table())
    resolved["wall_time_s"] = report.metadata.get("wall_time_s")
    return resolved


def cmd_selftest(args, out: Outputs | None) -> dict:
    from .selftest import run_all

    if not run_all(sys.stdout):
        raise CheckFailed("selftest failed")
    return {}


def _add_admm(p, K=10):
    p.add_argument("--K", type=_positive_int, default=K, help="ADMM iterations")
    p.add_argument("--mu", type=_positive_float, default=2.0, help="ADMM penalty parameter")


def _add_model(p, required=False):
    p.add_argument("--model", choices=["brownian", "compound-poisson"], default=None,
                   help="signal model" + (" (required)" if required else ""))
    p.add_argument("--lambda", dest="poisson_rate", type=_positive_float, default=0.6,
                   help="compound Poisson jump rate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="directory receiving every output")
    common.add_argument("--config", default=None, help="JSON file supplying flag defaults")
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="proxlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a noisy signal batch")
    _add_model(g, required=True)
    g.add_argument("--n", type=_positive_int, default=100)
    g.add_argument("--count", type=_positive_int, default=500)
    g.add_argument("--sigma2", type=_positive_float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="batch.json")

    t = sub.add_parser("train", parents=[common], help="learn a shrinkage spline")
    t.add_argument("--batch", default=None, help="signal batch JSON (required)")
    t.add_argument("--mode", choices=[CONSTRAINED, UNCONSTRAINED], default=CONSTRAINED)
    _add_admm(t)
    t.add_argument("--gamma", type=_nonneg_float, default=2e-4)
    t.add_argument("--iters", type=_positive_int, default=1000)
    t.add_argument("--delta", type=_positive_float, default=None)
    t.add_argument("--m-half", type=_positive_int, default=None)
    t.add_argument("--kernel-order", type=int, default=3)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="spline.json")

    d = sub.add_parser("denoise", parents=[common], help="denoise a batch with a learned spline")
    d.add_argument("--spline", default=None)
    d.add_argument("--in", default=None)
    d.add_argument("--scale-lambda", type=_positive_float, default=None,
                   help="apply the spline scaled to sigma2_new / sigma2_train")
    _add_admm(d)
    d.add_argument("--out", default="xhat.json")

    e = sub.add_parser("evaluate", parents=[common], help="run an experiment preset")
    e.add_argument("--preset", choices=PRESETS, default="desk")
    e.add_argument("--lambda", dest="poisson_rate", type=_positive_float, default=0.6)
    e.add_argument("--sigma2", type=_positive_float, nargs="+", default=None)
    e.add_argument("--train-count", type=_positive_int, default=None)
    e.add_argument("--test-count", type=_positive_int, default=None)
    _add_admm(e)
    e.add_argument("--gamma", type=_nonneg_float, default=2e-4)
    e.add_argument("--iters", type=_positive_int, default=1000)
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("scale", parents=[common], help="rescale a constrained spline to a new noise level")
    s.add_argument("--spline", default=None)
    s.add_argument("--lambda", dest="lam", type=_positive_float, default=None,
                   help="sigma2_new / sigma2_train")
    s.add_argument("--in", default=None, help="optional batch to denoise with the scaled operator")
    s.add_argument("--points", type=_positive_int, default=2001)
    _add_admm(s)
    s.add_argument("--out", default=None)

    p = sub.add_parser("penalty", parents=[common], help="recover the convex penalty of a spline")
    p.add_argument("--spline", default=None)
    p.add_argument("--points", type=_positive_int, default=20001)
    p.add_argument("--out", default="phi.csv")

    sub.add_parser("selftest", parents=[common], help="run the built-in consistency checks")
    return parser


REQUIRED = {
    "generate": ("model",),
    "train": ("batch",),
    "denoise": ("spline", "in"),
    "scale": ("spline", "lam"),
    "penalty": ("spline",),
}

COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "evaluate": cmd_evaluate,
    "scale": cmd_scale,
    "penalty": cmd_penalty,
    "selftest": cmd_selftest,
}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            parser.error(f"unknown keys in config file: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s): "
                     + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.WARNING - 10 * min(args.verbose, 2))
    if args.command == "selftest" and not args.out_dir:
        out = None
    else:
        out = Outputs(_out_dir(args, f"proxlearn-{args.command}"))
    try:
        resolved = COMMANDS[args.command](args, out)
    except CheckFailed as exc:
        print(f"proxlearn {args.command}: check failed: {exc}", file=sys.stderr)
        if out is not None:
            out.finish({"command": args.command, "error": str(exc)})
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"proxlearn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if out is not None:
        out.finish({"command": args.command, "version": __version__, **resolved})
    return 0


if __name__ == "__main__":
    sys.exit(main())
