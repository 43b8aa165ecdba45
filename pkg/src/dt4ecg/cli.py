"""Command-line entry point: ``dt4ecg {init,gen,train,eval,ablate,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .dsp import DspConfig
from .model import CheckpointFormatError, ModelConfig, load_checkpoint
from .sca import ScaModule, sca_forward
from .synthecg import DatasetFormatError, DatasetSpec, SegmentDataset, build_dataset
from .train import TrainConfig, TrainLog, ablate, evaluate, train, write_ablation_csv

log = logging.getLogger("dt4ecg")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT = 0, 1, 2

DATASET_FILE = "dataset.bin"
MANIFEST_FILE = "dataset.json"
CHECKPOINT_FILE = "model.dt4e"
TRAINLOG_FILE = "trainlog.csv"
METRICS_FILE = "metrics.json"
ABLATION_FILE = "ablation.csv"


class ConfigError(ValueError):
    """Bad configuration or missing input; maps to exit code 2."""


@dataclass
class AblateConfig:
    epochs: int = 20
    workers: int = 1
    # re-run one variant for a single epoch and require identical numbers
    verify_determinism: bool = True


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dsp: DspConfig = field(default_factory=DspConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    _SECTIONS = {"dataset": DatasetSpec, "dsp": DspConfig, "model": ModelConfig,
                 "train": TrainConfig, "ablate": AblateConfig}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        top = {"out_dir", "seed", *cls._SECTIONS}
        unknown = sorted(set(d) - top)
        if unknown:
            raise ConfigError(f"config: unknown key(s) {unknown}")
        kwargs = {}
        for name, typ in cls._SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config: section '{name}' must be an object")
            bad = sorted(set(sec) - set(typ.__dataclass_fields__))
            if bad:
                raise ConfigError(f"config: unknown key(s) in '{name}': {bad}")
            try:
                kwargs[name] = typ(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config: section '{name}': {exc}") from None
        cfg = cls(out_dir=str(d.get("out_dir", cls.out_dir)), seed=d.get("seed", 0), **kwargs)
        if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
            raise ConfigError(f"config: seed must be a non-negative integer, got {cfg.seed!r}")
        cfg.apply_seed(cfg.seed)
        try:
            cfg.dataset.validate()
            cfg.model.validate()
            cfg.train.validate()
        except ValueError as exc:
            raise ConfigError(f"config: {exc}") from None
        if cfg.model.input_len != cfg.dsp.window_samples:
            raise ConfigError(f"config: model.input_len {cfg.model.input_len} != "
                              f"dsp.window_samples {cfg.dsp.window_samples}")
        if cfg.model.n_subjects != cfg.dataset.n_subjects:
            raise ConfigError(f"config: model.n_subjects {cfg.model.n_subjects} != "
                              f"dataset.n_subjects {cfg.dataset.n_subjects}")
        return cfg

    def apply_seed(self, seed: int) -> None:
        """The top-level seed is the single source of randomness for every stage."""
        self.seed = seed
        self.dataset.seed = self.model.seed = self.train.seed = seed


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(d)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.apply_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _out_dir(cfg: RunConfig, create: bool = True) -> Path:
    out = Path(cfg.out_dir)
    if create:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_dataset(cfg: RunConfig) -> SegmentDataset:
    path = Path(cfg.out_dir) / DATASET_FILE
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path} (run 'gen' first)")
    try:
        return SegmentDataset.load(path)
    except DatasetFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_init(cfg: RunConfig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return p


def cmd_gen(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    ds = build_dataset(cfg.dataset, cfg.dsp)
    ds.save(out / DATASET_FILE, out / MANIFEST_FILE)
    log.info("wrote %d segments (%d train / %d test) to %s",
             len(ds), ds.manifest["train"], ds.manifest["test"], out / DATASET_FILE)
    return out / DATASET_FILE


def cmd_train(cfg: RunConfig) -> TrainLog:
    from .model import Dt4EcgModel

    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    model = Dt4EcgModel(cfg.model)
    return train(model, ds, cfg.train, checkpoint_path=out / CHECKPOINT_FILE, log_path=out / TRAINLOG_FILE)


def cmd_eval(cfg: RunConfig, checkpoint=None) -> dict:
    ds = _load_dataset(cfg)
    ckpt = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / CHECKPOINT_FILE
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    try:
        model = load_checkpoint(ckpt)
    except CheckpointFormatError as exc:
        raise ConfigError(f"{ckpt}: {exc}") from None
    test = ds.part("test")
    if len(test) == 0:
        raise ConfigError("dataset has an empty test split")
    if model.config.input_len != ds.x.shape[1]:
        raise ConfigError(f"checkpoint expects windows of {model.config.input_len} samples, "
                          f"dataset has {ds.x.shape[1]}")
    if int(test.subject.max()) >= model.config.n_subjects:
        raise ConfigError(f"checkpoint has {model.config.n_subjects} subject classes, "
                          f"dataset has subject id {int(test.subject.max())}")
    rid, ract = evaluate(model, test)
    metrics = {"checkpoint": str(ckpt), "n_test": len(test), "id": rid.to_dict(), "activity": ract.to_dict()}
    (_out_dir(cfg) / METRICS_FILE).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def runs_match(a: TrainLog, b: TrainLog) -> bool:
    return a.numeric_rows() == b.numeric_rows() and a.step_weights == b.step_weights


def cmd_ablate(cfg: RunConfig) -> list[dict]:
    ds = _load_dataset(cfg)
    out = _out_dir(cfg)
    tcfg = TrainConfig(**{**asdict(cfg.train), "epochs": cfg.ablate.epochs})
    results = ablate(ds, model_cfg=cfg.model, train_cfg=tcfg, workers=cfg.ablate.workers)
    write_ablation_csv(results, out / ABLATION_FILE)
    rows = [r.row() for r in results]
    if cfg.ablate.verify_determinism:
        probe = TrainConfig(**{**asdict(tcfg), "epochs": 1})
        a, b = ablate(ds, [{"sca": True, "gradnorm": True}] * 2, cfg.model, probe)
        if not runs_match(a.log, b.log):
            raise RuntimeError("ablate: identical variant runs diverged; results are not deterministic")
    return rows


def op_inventory():
    """(name, builder, tol) for every differentiable op; ``builder(rng)`` returns ``(f, x, wrt)``."""
    F64 = np.float64

    def proj(rng, shape):
        return ad.Tensor(rng.normal(size=shape))

    def conv(rng):
        layer = nn.Conv1d(2, 3, 3, stride=2, padding=1, rng=rng, dtype=F64)
        p = proj(rng, (2, 3, 4))
        return lambda x: ad.sum(layer(x) * p), rng.normal(size=(2, 2, 8)), layer.parameters()

    def batchnorm(rng):
        layer = nn.BatchNorm1d(3, dtype=F64)
        layer.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        p = proj(rng, (2, 3, 5))
        return lambda x: ad.sum(layer(x) * p), rng.normal(size=(2, 3, 5)), layer.parameters()

    def unary(op, shape, out_shape):
        def build(rng):
            x = rng.normal(size=shape)
            if op is nn.relu:
                x = np.where(np.abs(x) < 1e-3, 0.5, x)
            p = proj(rng, out_shape)
            return lambda t: ad.sum(op(t) * p), x, []
        return build

    def linear(rng):
        layer = nn.Linear(5, 3, rng=rng, dtype=F64)
        p = proj(rng, (2, 4, 3))
        return lambda x: ad.sum(layer(x) * p), rng.normal(size=(2, 4, 5)), layer.parameters()

    def residual(rng):
        blk = nn.ResidualBlock1d(2, 4, 2, rng=rng, dtype=F64)
        p = proj(rng, (2, 4, 4))
        return lambda x: ad.sum(blk(x) * p), rng.normal(size=(2, 2, 8)), blk.parameters()

    def sca(rng):
        m = ScaModule(4, 10, reduction=2, rng=rng, dtype=F64)
        for prm in m.parameters():
            prm.data[...] = rng.normal(0, 0.5, size=prm.shape)
        p = proj(rng, (2, 4, 10))
        return lambda x: ad.sum(sca_forward(x, m) * p), rng.normal(size=(2, 4, 10)), m.parameters()

    def softmax_ce(rng):
        labels = rng.integers(0, 5, size=4)
        return lambda z: nn.cross_entropy(z, labels), rng.normal(size=(4, 5)), []

    return [
        ("conv1d", conv, 1e-5),
        ("batchnorm", batchnorm, 1e-5),
        ("relu", unary(nn.relu, (2, 3, 4), (2, 3, 4)), 1e-5),
        ("sigmoid", unary(nn.sigmoid, (2, 3, 4), (2, 3, 4)), 1e-5),
        ("linear", linear, 1e-5),
        ("avg_pool_time", unary(nn.avg_pool_time, (2, 3, 4), (2, 3, 1)), 1e-5),
        ("avg_pool_channel", unary(nn.avg_pool_channel, (2, 3, 4), (2, 1, 4)), 1e-5),
        ("global_avg_pool", unary(nn.global_avg_pool, (2, 3, 4), (2, 3)), 1e-5),
        ("softmax", unary(nn.softmax, (3, 4), (3, 4)), 1e-5),
        ("softmax_cross_entropy", softmax_ce, 1e-5),
        ("residual_block", residual, 1e-4),
        ("sca", sca, 1e-4),
    ]


def cmd_gradcheck(seeds=range(10)) -> list[dict]:
    rows = []
    for name, build, tol in op_inventory():
        worst = 0.0
        for seed in seeds:
            f, x, wrt = build(np.random.default_rng(seed))
            worst = max(worst, ad.gradcheck(f, x, tol=tol, wrt=wrt).max_rel_error)
        rows.append({"op": name, "seeds": len(seeds), "max_rel_error": worst, "tol": tol, "passed": worst <= tol})
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dt4ecg", description="ECG subject and activity classifier")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("init", "write a config file with every default filled in"),
                        ("gen", "generate and preprocess the synthetic dataset"),
                        ("train", "train a model and write checkpoint and log"),
                        ("eval", "evaluate a checkpoint on the test split"),
                        ("ablate", "train the SCA x GradNorm variant grid"),
                        ("gradcheck", "finite-difference check of every op")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--out", type=str, default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
        if name == "eval":
            p.add_argument("--checkpoint", type=str, default=None, help="checkpoint path")
        if name == "init":
            p.add_argument("path", nargs="?", default="config.json", help="where to write the config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            rows = cmd_gradcheck()
            for r in rows:
                print(f"{'PASS' if r['passed'] else 'FAIL'} {r['op']:<22} max_rel_error={r['max_rel_error']:.3e} "
                      f"tol={r['tol']:.0e} seeds={r['seeds']}")
            return EXIT_OK if all(r["passed"] for r in rows) else EXIT_INTERNAL
        cfg = _resolve(args)
        if args.command == "init":
            print(cmd_init(cfg, args.path))
        elif args.command == "gen":
            print(cmd_gen(cfg))
        elif args.command == "train":
            tlog = cmd_train(cfg)
            last = tlog.rows[-1]
            print(f"epochs={len(tlog.rows)} acc_id_test={last['acc_id_test']:.4f} "
                  f"acc_act_test={last['acc_act_test']:.4f}")
        elif args.command == "eval":
            m = cmd_eval(cfg, args.checkpoint)
            for task in ("id", "activity"):
                r = m[task]
                print(f"{task}: accuracy={r['accuracy']:.4f} precision={r['precision']:.4f} "
                      f"recall={r['recall']:.4f} f1={r['f1']:.4f}")
        elif args.command == "ablate":
            rows = cmd_ablate(cfg)
            print(",".join(rows[0]))
            for r in rows:
                print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r.values()))
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
