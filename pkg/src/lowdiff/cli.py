"""Command-line entry point.

Exit codes: 0 ok, 1 usage or configuration error, 2 data/storage error,
3 invariant violation (e.g. a recovered digest that disagrees with training).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from . import failsim, planner
from .compression import RandomK, TopK
from .errors import ConfigError, LowDiffError
from .model import AdamConfig, LayeredWorkload
from .pipeline import PipelineConfig, read_kv, run_pipeline, write_kv
from .plus import run_plus
from .recovery import RecoveryMode, parallel_recovery, plan_recovery, recover_serial
from .store import Kind, StorageBackend, decode_header, decode_record

log = logging.getLogger("lowdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
MODES = ("lowdiff", "plus", "naive-dc", "full-only")


@dataclass
class RunConfig:
    # workload
    layer_sizes: str = "256,256,256,256"
    rows_per_worker: int = 16
    workers: int = 4
    seed: int = 0
    # compression and pipeline
    ratio: float = 0.01
    compressor: str = "topk"
    mode: str = "lowdiff"
    iterations: int = 200
    full_interval: int = 50
    batch_size: int = 4
    batch_mode: str = "record"
    queue_capacity: int = 16
    async_full: bool = False
    persist_interval: int = 10
    out: str = "run"
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    # cost model
    # hours, bytes, bytes/hour; iter_time in seconds
    N: float = 8.0
    M: float = 1.0
    W: float = 3.24e13
    S: float = 5e9
    T: float = 24.0
    R_F: float = 30.0 / 3600.0
    R_D: float = 2.0 / 3600.0
    iter_time: float = 10.0
    fcf_list: str = "10,20,50,100"
    bs_list: str = "1,2,3,4,5,6"
    # failure simulation
    policy: str = "lowdiff,lowdiff-plus,gemini-like,checkfreq-like"
    mtbf: str = "0.5,1,2"
    gpus: str = "8"
    seeds: int = 20
    software_fraction: float = 0.5
    mtbf_convention: str = "cluster"

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls()
        for k, raw in values.items():
            cfg.set(k, raw)
        return cfg

    def set(self, key: str, raw) -> None:
        default = getattr(type(self), key)
        try:
            if isinstance(default, bool):
                if isinstance(raw, bool):
                    value = raw
                elif str(raw).lower() in ("1", "true", "yes", "on"):
                    value = True
                elif str(raw).lower() in ("0", "false", "no", "off"):
                    value = False
                else:
                    raise ValueError(raw)
            else:
                value = type(default)(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    # -- builders ---------------------------------------------------------------

    def workload(self) -> LayeredWorkload:
        return LayeredWorkload(_ints(self.layer_sizes, "layer_sizes"), self.seed, self.seed + 1, self.workers, self.rows_per_worker)

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.bias_correction)

    def compressor_kind(self):
        if self.compressor == "topk":
            return TopK()
        if self.compressor == "randomk":
            return RandomK(self.seed)
        raise ConfigError(f"unknown compressor {self.compressor!r}")

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            full_interval=self.full_interval,
            batch_size=self.batch_size,
            batch_mode=self.batch_mode,
            queue_capacity=self.queue_capacity,
            total_iterations=self.iterations,
            ratio=self.ratio,
            compressor=self.compressor_kind(),
            mode=self.mode,
            async_full=self.async_full,
        )

    def system(self) -> planner.SystemParams:
        return planner.SystemParams(self.N, self.M, self.W, self.S, self.T, self.R_F, self.R_D, self.iter_time)


def _ints(text: str, key: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None


def load_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = read_kv(Path(args.config))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    cfg = RunConfig.from_mapping(values)
    overrides = {
        "seed": "seed", "mode": "mode", "batch_size": "batch_size", "full_interval": "full_interval",
        "batch_mode": "batch_mode", "out": "out", "iters": "iterations", "mtbf": "mtbf", "gpus": "gpus",
        "policy": "policy", "seeds": "seeds",
    }
    for attr, key in overrides.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg.set(key, v)
    return cfg


# -- commands -------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("ckpt_*.ld"):
        stale.unlink()
    backend = StorageBackend(out)
    workload = cfg.workload()
    adam = cfg.adam()
    common = {
        "layer_sizes": cfg.layer_sizes, "workers": cfg.workers, "rows_per_worker": cfg.rows_per_worker,
        "seed": cfg.seed, "lr": repr(cfg.lr), "beta1": repr(cfg.beta1), "beta2": repr(cfg.beta2),
        "eps": repr(cfg.eps), "bias_correction": cfg.bias_correction,
    }
    if cfg.mode == "plus":
        res = run_plus(workload, adam, backend, cfg.iterations, cfg.persist_interval, max(cfg.queue_capacity, workload.num_layers))
        manifest = {**res.manifest(cfg.iterations, cfg.persist_interval), **common}
        digests = res.training.digests
        runtime = {"training_seconds": f"{res.training.seconds:.6f}", "replica_seconds": f"{res.replica.seconds:.6f}"}
    else:
        pcfg = cfg.pipeline()
        res = run_pipeline(workload, pcfg, adam, backend)
        manifest = {**res.manifest(pcfg), **common}
        digests = res.training.digests
        runtime = res.runtime_stats()
    write_kv(out / "manifest.txt", manifest)
    write_kv(out / "runtime.txt", runtime)
    (out / "digests.csv").write_text("iteration,digest\n" + "".join(f"{t},{d}\n" for t, d in sorted(digests.items())))
    print(f"trained {cfg.iterations} iterations mode={cfg.mode} final_digest={manifest['final_digest']}")
    print(f"fulls={manifest['fulls_written']} diffs={manifest['diffs_written']} io_ops={manifest['io_ops']} -> {out}")
    return EXIT_OK


def _adam_from_manifest(manifest: dict) -> AdamConfig:
    try:
        return AdamConfig(
            float(manifest["lr"]), float(manifest["beta1"]), float(manifest["beta2"]),
            float(manifest["eps"]), manifest["bias_correction"] == "True",
        )
    except KeyError as exc:
        raise ConfigError(f"manifest lacks optimizer field {exc}") from None


def cmd_recover(args) -> int:
    out = Path(args.out)
    manifest_path = out / "manifest.txt"
    if args.config:
        adam = load_config(args).adam()
    elif manifest_path.exists():
        adam = _adam_from_manifest(read_kv(manifest_path))
    else:
        adam = AdamConfig()
    backend = StorageBackend(out)
    at = args.at
    if at is None:
        at = 1 << 62
    if args.accumulated:
        mode = RecoveryMode.PARALLEL_ACCUMULATED
    elif args.parallel:
        mode = RecoveryMode.PARALLEL_EXACT
    else:
        mode = RecoveryMode.SERIAL
    plan = plan_recovery(backend, at, mode)
    if mode == RecoveryMode.SERIAL:
        state = recover_serial(plan, adam)
        detail = ""
    else:
        state, stats = parallel_recovery(plan, adam, args.workers)
        detail = f" units={stats.units} tree_rounds={stats.tree_rounds} base_merges={stats.base_merges}"
    digest = state.digest()
    print(f"iteration={plan.target_iteration} base={plan.base_iteration} mode={mode.value} digest={digest}{detail}")
    digests_path = out / "digests.csv"
    if digests_path.exists() and mode != RecoveryMode.PARALLEL_ACCUMULATED:
        expected = dict(line.split(",", 1) for line in digests_path.read_text().splitlines()[1:])
        want = expected.get(str(plan.target_iteration))
        if want is not None and want != digest:
            print(f"digest mismatch: training recorded {want}", file=sys.stderr)
            return EXIT_INVARIANT
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = load_config(args)
    try:
        p = cfg.system()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    opt = planner.optimal_config(p)
    fi, bs = opt.iteration_space(p)
    print(f"f*={opt.f:.6g} per hour  b*={opt.b:.6g} hours")
    if opt.clamped:
        print(f"clamped to f*b=1: f={opt.f_feasible:.6g} b={opt.b_feasible:.6g}")
    print(f"full_interval={fi:.2f} iterations  batch_size={bs:.2f} iterations")
    csv_text = planner.table_csv(p, _ints(cfg.fcf_list, "fcf_list"), _ints(cfg.bs_list, "bs_list"))
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    try:
        base = cfg.system()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    policies = [p.strip() for p in cfg.policy.split(",") if p.strip()]
    try:
        rows = failsim.sweep(
            policies, base, _floats(cfg.mtbf, "mtbf"), _ints(cfg.gpus, "gpus"), cfg.seeds,
            cfg.software_fraction, cfg.mtbf_convention,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = failsim.rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    raw = Path(args.path).read_bytes()
    h = decode_header(raw)
    print(f"kind={h.kind.name.lower()} dense_len={h.dense_len} iteration={h.iteration} "
          f"covered={h.covered[0]}..{h.covered[1]} ratio={h.ratio:.6g} payload_bytes={h.payload_len} "
          f"total_bytes={len(raw)} crc32={h.crc:08x}")
    rec = decode_record(raw)
    print("checksum=ok")
    if rec.kind == Kind.FULL:
        st = rec.state
        print(f"psi={st.size} step={st.step} digest={st.digest()}")
    else:
        grads = rec.gradients
        layout = "accumulated" if rec.accumulated else ("record" if rec.kind == Kind.BATCHED else "single")
        print(f"entries={len(grads)} layout={layout}")
        for g in grads:
            head = ",".join(str(i) for i in g.indices[:5])
            print(f"  iteration={g.iteration} k={g.k} ratio={g.ratio:.6g} indices={head}{',...' if g.k > 5 else ''}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lowdiff", description="Differential checkpointing experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run the training/checkpointing pipeline")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--full-interval", type=int)
    p.add_argument("--batch-mode", choices=("record", "accumulate"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recover", help="rebuild state from a checkpoint chain")
    p.add_argument("--config")
    p.add_argument("--out", default="run", help="checkpoint directory")
    p.add_argument("--at", type=int, help="recover the latest state at or before this iteration")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--accumulated", action="store_true", help="parallel merge by summing gradients (approximate)")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("plan", help="closed-form (f*, b*) and wasted-time table")
    p.add_argument("--config")
    p.add_argument("--csv", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="failure-injection sweep")
    common(p)
    p.add_argument("--mtbf", help="comma-separated MTBF values in hours")
    p.add_argument("--gpus", help="comma-separated GPU counts")
    p.add_argument("--policy", help="comma-separated policy names")
    p.add_argument("--seeds", type=int)
    p.add_argument("--csv", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inspect", help="dump one .ld record")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LowDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
