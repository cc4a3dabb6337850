"""Command line: ``jmuse <command> [--config PATH] [--seed N] [--out DIR] ...``.

Every run lives in one experiment directory::

    config.yaml            effective configuration
    phantoms/*.mcv         training, validation and held-out volumes
    coils.mcv, kspace.mck  simulated acquisition
    models/*.men           trained energies, lipschitz.txt
    recon/<method>.mcv     reconstructions and cost traces
    metrics/, images/      reports and PNG slices
    logs/                  one log file per command
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import ConfigError, ExperimentConfig, load_config, train_config
from .energy import EnergyNet
from .fileio import (
    FormatError,
    export_slice_png,
    read_kspace,
    read_volume,
    write_kspace,
    write_volume,
)
from .metrics import MetricReport
from .nn.network import CheckpointError, atomic_write
from .solver import SolverAborted, format_trace
from .training import SliceDataset, TrainingDiverged, format_loss_log, train
from .wavelet import WaveletDiverged

log = logging.getLogger("jmuse")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_MISSING_MODEL = 5
EXIT_SOLVER_ABORT = 6
EXIT_FORMAT = 7
EXIT_TRAINING = 8

MODEL_FILES = {"joint": "joint.men", "independent": "single.men"}


class MissingInput(FileNotFoundError):
    pass


class MissingModel(FileNotFoundError):
    pass


class Run:
    """Paths of one experiment directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str = "run"):
        self.cfg = cfg
        self.out = out
        self.command = command
        self.log_handler: logging.Handler | None = None

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def phantom(self, kind: str, seed: int) -> Path:
        return self.path("phantoms", f"{kind}_{seed}.mcv")

    @property
    def truth(self) -> Path:
        return self.phantom("test", ex.test_seed(self.cfg))

    def model(self, method: str) -> Path:
        return self.path("models", MODEL_FILES[method])

    def recon(self, method: str) -> Path:
        return self.path("recon", f"{method}.mcv")

    def require(self, *paths: Path, model: bool = False) -> None:
        for p in paths:
            if not p.is_file():
                raise (MissingModel if model else MissingInput)(f"missing {'model' if model else 'input'}: {p}")

    def prepare(self, *subdirs: str) -> None:
        """Create output directories and store the effective configuration."""
        for d in ("logs",) + subdirs:
            self.path(d).mkdir(parents=True, exist_ok=True)
        atomic_write(self.path("config.yaml"), self.cfg.dump().encode("utf-8"))
        if self.log_handler is None:
            h = logging.FileHandler(self.path("logs", f"{self.command}.log"), mode="a")
            h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            logging.getLogger().addHandler(h)
            self.log_handler = h

    def close(self) -> None:
        if self.log_handler is not None:
            logging.getLogger().removeHandler(self.log_handler)
            self.log_handler.close()
            self.log_handler = None


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(run: Run, args) -> None:
    """Generate training, validation and held-out phantom volumes."""
    cfg = run.cfg
    run.prepare("phantoms")
    for s in cfg.seeds.train_phantoms:
        write_volume(run.phantom("train", s), ex.make_volume(cfg, s))
    write_volume(run.phantom("val", cfg.seeds.val_phantom), ex.make_volume(cfg, cfg.seeds.val_phantom))
    write_volume(run.truth, ex.make_volume(cfg, ex.test_seed(cfg)))
    log.info("wrote phantoms to %s", run.path("phantoms"))


def cmd_simulate(run: Run, args) -> None:
    """Simulate coil maps and noisy radial k-space of the held-out phantom."""
    run.require(run.truth)
    truth = read_volume(run.truth)
    run.prepare()
    coils = ex.make_coils(run.cfg)
    acq = ex.make_acquisition(run.cfg, coils)
    data = ex.simulate(run.cfg, truth.astype(complex), acq, run.cfg.seeds.run)
    write_volume(run.path("coils.mcv"), coils)
    write_kspace(run.path("kspace.mck"), data)
    log.info("spokes per contrast: %s", [p.shape[0] // run.cfg.trajectory.samples_per_spoke for p in data.points])


def _train_methods(args) -> list[str]:
    if args.method in (None, "all"):
        return ["joint", "independent"]
    if args.method not in MODEL_FILES:
        raise ConfigError(f"no trained model for method {args.method!r}")
    return [args.method]


def cmd_train(run: Run, args) -> None:
    """Train the joint and/or single-contrast energy networks."""
    cfg = run.cfg
    inputs = [run.phantom("train", s) for s in cfg.seeds.train_phantoms]
    val_path = run.phantom("val", cfg.seeds.val_phantom)
    run.require(*inputs, val_path)
    vols = [read_volume(p) for p in inputs]
    val = [read_volume(val_path)]
    run.prepare("models")
    for method in _train_methods(args):
        joint = method == "joint"
        ds = SliceDataset.from_volumes(vols, per_contrast=not joint)
        vds = SliceDataset.from_volumes(val, per_contrast=not joint)
        res = train(
            ds, train_config(cfg), vds,
            on_epoch=lambda e, t, v: log.info("%s epoch %d train %.6g val %.6g", method, e, t, v),
        )
        res.net.save(run.model(method), best_epoch=res.best_epoch)
        _write_text(run.path("logs", f"loss_{method}.txt"), format_loss_log(res.history))


def _load_net(run: Run, method: str) -> EnergyNet:
    path = run.model(method)
    run.require(path, model=True)
    return EnergyNet.load(path)


def cmd_lipschitz(run: Run, args) -> None:
    """Estimate the Lipschitz constant of each trained energy gradient."""
    methods = _train_methods(args)
    nets = {m: _load_net(run, m) for m in methods}
    run.prepare("models")
    lines = []
    for m, net in nets.items():
        l_hat, L = ex.lipschitz_for(run.cfg, net)
        log.info("%s: L_hat %.6g -> L %.6g", m, l_hat, L)
        lines += [f"{m}_l_hat={l_hat:.9g}", f"{m}_L={L:.9g}"]
    path = run.path("models", "lipschitz.txt")
    old = _read_kv(path) if path.is_file() else {}
    old.update(dict(line.split("=") for line in lines))
    _write_text(path, "".join(f"{k}={v}\n" for k, v in old.items()))


def _solver_L(run: Run, method: str) -> float | None:
    if run.cfg.recon.L is not None:
        return run.cfg.recon.L
    path = run.path("models", "lipschitz.txt")
    run.require(path)
    kv = _read_kv(path)
    key = f"{method}_L"
    if key not in kv:
        raise MissingInput(f"{path} has no entry {key}; run the lipschitz command")
    return float(kv[key])


def cmd_recon(run: Run, args) -> None:
    """Reconstruct with --method joint, independent or wavelet."""
    method = args.method or "joint"
    if method not in ex.METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(ex.METHODS)}")
    run.require(run.path("kspace.mck"), run.path("coils.mcv"))
    net = L = lam = None
    if method in MODEL_FILES:
        net = _load_net(run, method)
        L = _solver_L(run, method)
    data = read_kspace(run.path("kspace.mck"))
    coils = read_volume(run.path("coils.mcv")).astype(complex)
    acq = ex.acquisition_for(data, coils)
    extra = ""
    if method == "wavelet":
        lam, scores = ex.select_lambda(run.cfg, acq)
        extra = f"# lambda {lam:g}\n" + "".join(f"# grid {k:g} mean_psnr {v:.6f}\n" for k, v in scores.items())
    out = ex.reconstruct(method, run.cfg, data, acq, net, L, lam)
    run.prepare("recon")
    write_volume(run.recon(method), out.volume)
    text = extra
    for i, trace in enumerate(out.traces):
        if len(out.traces) > 1:
            text += f"# contrast {i + 1}\n"
        text += format_trace(trace)
    _write_text(run.path("recon", f"{method}_trace.txt"), text or "# no cost trace\n")


def cmd_eval(run: Run, args) -> None:
    """Compute PSNR/SSIM reports and export slice images."""
    run.require(run.truth)
    methods = [args.method] if args.method else [m for m in ex.METHODS if run.recon(m).is_file()]
    if not methods:
        raise MissingInput(f"no reconstructions in {run.path('recon')}")
    run.require(*[run.recon(m) for m in methods])
    truth = read_volume(run.truth).astype(complex)
    recs = {m: read_volume(run.recon(m)).astype(complex) for m in methods}
    run.prepare("metrics", "images")
    summary = []
    mid = truth.shape[1] // 2
    for m, rec in recs.items():
        rep = MetricReport.compute(m, truth, rec)
        _write_text(run.path("metrics", f"{m}.txt"), rep.to_table())
        _write_text(run.path("metrics", f"{m}.kv"), rep.to_kv())
        summary.append(rep.to_table())
        for c in range(rec.shape[0]):
            export_slice_png(run.path("images", f"{m}_c{c + 1}_z{mid}.png"), rec, c, "z", mid)
    for c in range(truth.shape[0]):
        export_slice_png(run.path("images", f"truth_c{c + 1}_z{mid}.png"), truth, c, "z", mid)
    _write_text(run.path("metrics", "summary.txt"), "\n".join(summary))
    print("\n".join(summary))


def cmd_run(run: Run, args) -> None:
    """Full pipeline: every stage and all three methods."""
    cmd_phantom(run, args)
    cmd_simulate(run, args)
    cmd_train(run, argparse.Namespace(method=None))
    cmd_lipschitz(run, argparse.Namespace(method=None))
    for m in ex.METHODS:
        cmd_recon(run, argparse.Namespace(method=m))
    cmd_eval(run, argparse.Namespace(method=None))


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "lipschitz": cmd_lipschitz,
    "recon": cmd_recon,
    "eval": cmd_eval,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override seeds.run")
    common.add_argument("--out", help="experiment directory (overrides output_dir)")
    common.add_argument("--method", help="joint | independent | wavelet")
    common.add_argument("--threads", type=int, default=0, help="BLAS/FFT threads, 0 = library default")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="jmuse", description="Joint multi-contrast energy reconstruction toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(type(h) is logging.StreamHandler for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)


def _threads(n: int):
    if n and n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(n)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.output_dir)
        run = Run(cfg, out, args.command)
        with _threads(args.threads):
            try:
                COMMANDS[args.command](run, args)
            finally:
                run.close()
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except MissingModel as exc:
        return _fail(EXIT_MISSING_MODEL, "missing model", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_INPUT, "missing input", exc)
    except (FormatError, CheckpointError) as exc:
        return _fail(EXIT_FORMAT, "format error", exc)
    except (SolverAborted, WaveletDiverged) as exc:
        return _fail(EXIT_SOLVER_ABORT, "solver aborted", exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_TRAINING, "training diverged", exc)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(f"jmuse: {kind}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
