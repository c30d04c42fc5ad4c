"""Command-line entry point.

Subcommands: ``train`` (one configured run), ``compare`` (grid over
algorithms, truncation windows and learning rates), ``verify`` (numerical
verification suites), ``analyze`` (windowed diagnostics over a metrics
file).  The configuration is one JSON file; ``--seed``, ``--out`` and
``--steps`` override it.  Exit codes: 0 success, 1 configuration error,
2 numeric failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import convergence_diagnostics
from .architectures import ElmanRnn, GenericRtrlState, Gru, LinearRnn, NeuralSde, TheoryRnn
from .datagen import (
    CharCursorStream,
    ChainStream,
    TeacherStream,
    build_vocab,
    encode_text,
    make_chain,
    make_output_map,
    sample_teacher,
)
from .errors import InvalidConfigError
from .model import ModelDims, SquasherSpec, identity_squasher, scaled_tanh
from .optim import RmspropState, Schedule
from .training import TbpttState, TrainLog, read_metrics, run_training, write_metrics
from .verify import run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_VERIFY = 3

EXPERIMENTS = ("linear", "elman", "neural-sde", "char-nlp", "theory-rnn")
DEFAULT_LR_GRID = (1e-2, 1e-3, 1e-4)  # repo convention, not a reference value


def sample_corpus_path() -> Path:
    """Path of the small text corpus shipped for tests and demos."""
    return Path(resources.files("rtrl").joinpath("data/sample_corpus.txt"))


def _take(src: dict, name: str, default, cast, where: str):
    value = src.pop(name, default)
    if value is None:
        return None
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"{where}.{name}: {exc}") from None


def _reject_unknown(src: dict, where: str) -> None:
    if src:
        raise InvalidConfigError(f"unknown key(s) in {where}: {sorted(src)}")


@dataclass(frozen=True)
class AlgorithmCfg:
    kind: str = "rtrl"  # "rtrl" | "tbptt"
    tau: int = 10
    window_mode: str = "sliding"

    @classmethod
    def from_dict(cls, src: dict) -> "AlgorithmCfg":
        src = dict(src)
        out = cls(
            kind=_take(src, "kind", cls.kind, str, "algorithm"),
            tau=_take(src, "tau", cls.tau, int, "algorithm"),
            window_mode=_take(src, "window_mode", cls.window_mode, str, "algorithm"),
        )
        _reject_unknown(src, "algorithm")
        if out.kind not in ("rtrl", "tbptt"):
            raise InvalidConfigError(f"algorithm.kind must be rtrl or tbptt, got {out.kind!r}")
        if out.tau < 1:
            raise InvalidConfigError(f"algorithm.tau must be >= 1, got {out.tau}")
        if out.window_mode not in ("sliding", "chunked"):
            raise InvalidConfigError(f"algorithm.window_mode must be sliding or chunked")
        return out


@dataclass(frozen=True)
class ModelCfg:
    n_hidden: int = 10
    n_input: int = 2
    delta: float = 1e-2
    activation: str = "tanh"
    arch: str = "gru"  # char-nlp architecture: "gru" | "elman"
    phi_scale: float = 0.1
    lam_scale: float = 1.0
    init_scale: float = 0.1
    n_latent: int = 1

    @classmethod
    def from_dict(cls, src: dict) -> "ModelCfg":
        src = dict(src)
        out = cls(
            n_hidden=_take(src, "n_hidden", cls.n_hidden, int, "model"),
            n_input=_take(src, "n_input", cls.n_input, int, "model"),
            delta=_take(src, "delta", cls.delta, float, "model"),
            activation=_take(src, "activation", cls.activation, str, "model"),
            arch=_take(src, "arch", cls.arch, str, "model"),
            phi_scale=_take(src, "phi_scale", cls.phi_scale, float, "model"),
            lam_scale=_take(src, "lam_scale", cls.lam_scale, float, "model"),
            init_scale=_take(src, "init_scale", cls.init_scale, float, "model"),
            n_latent=_take(src, "n_latent", cls.n_latent, int, "model"),
        )
        _reject_unknown(src, "model")
        if out.n_hidden < 1:
            raise InvalidConfigError(f"model.n_hidden must be >= 1, got {out.n_hidden}")
        if out.n_input < 1:
            raise InvalidConfigError(f"model.n_input must be >= 1, got {out.n_input}")
        if out.delta <= 0.0:
            raise InvalidConfigError(f"model.delta must be positive, got {out.delta}")
        if out.arch not in ("gru", "elman"):
            raise InvalidConfigError(f"model.arch must be gru or elman, got {out.arch!r}")
        return out


@dataclass(frozen=True)
class TeacherCfg:
    n_hidden: int = 10
    wishart_degree: int = 20
    elman_c: float = 1e-3
    w_in_std: float = 1.0
    input_std: float = 1.0
    activation: str = "tanh"

    @classmethod
    def from_dict(cls, src: dict) -> "TeacherCfg":
        src = dict(src)
        out = cls(
            n_hidden=_take(src, "n_hidden", cls.n_hidden, int, "teacher"),
            wishart_degree=_take(src, "wishart_degree", cls.wishart_degree, int, "teacher"),
            elman_c=_take(src, "elman_c", cls.elman_c, float, "teacher"),
            w_in_std=_take(src, "w_in_std", cls.w_in_std, float, "teacher"),
            input_std=_take(src, "input_std", cls.input_std, float, "teacher"),
            activation=_take(src, "activation", cls.activation, str, "teacher"),
        )
        _reject_unknown(src, "teacher")
        return out


@dataclass(frozen=True)
class DataCfg:
    corpus_path: str = ""
    chain_kind: str = "scaled-tanh"
    chain_lip: float = 0.5
    noise_scale: float = 1.0
    out_gain: float = 0.5
    out_noise: float = 0.1

    @classmethod
    def from_dict(cls, src: dict) -> "DataCfg":
        src = dict(src)
        out = cls(
            corpus_path=_take(src, "corpus_path", cls.corpus_path, str, "data") or "",
            chain_kind=_take(src, "chain_kind", cls.chain_kind, str, "data"),
            chain_lip=_take(src, "chain_lip", cls.chain_lip, float, "data"),
            noise_scale=_take(src, "noise_scale", cls.noise_scale, float, "data"),
            out_gain=_take(src, "out_gain", cls.out_gain, float, "data"),
            out_noise=_take(src, "out_noise", cls.out_noise, float, "data"),
        )
        _reject_unknown(src, "data")
        return out


@dataclass(frozen=True)
class OptimizerCfg:
    kind: str = "rmsprop"  # "rmsprop" | "sgd"
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, src: dict) -> "OptimizerCfg":
        src = dict(src)
        out = cls(
            kind=_take(src, "kind", cls.kind, str, "optimizer"),
            rho=_take(src, "rho", cls.rho, float, "optimizer"),
            eps=_take(src, "eps", cls.eps, float, "optimizer"),
        )
        _reject_unknown(src, "optimizer")
        if out.kind not in ("rmsprop", "sgd"):
            raise InvalidConfigError(f"optimizer.kind must be rmsprop or sgd, got {out.kind!r}")
        return out


@dataclass(frozen=True)
class ScheduleCfg:
    alpha0: float = 1e-3
    gamma: float = 0.7
    offset: float = 1.0

    @classmethod
    def from_dict(cls, src: dict) -> "ScheduleCfg":
        src = dict(src)
        out = cls(
            alpha0=_take(src, "alpha0", cls.alpha0, float, "schedule"),
            gamma=_take(src, "gamma", cls.gamma, float, "schedule"),
            offset=_take(src, "offset", cls.offset, float, "schedule"),
        )
        _reject_unknown(src, "schedule")
        if not 0.0 < out.gamma <= 1.0:
            raise InvalidConfigError(f"schedule.gamma must lie in (0, 1], got {out.gamma}")
        if out.alpha0 <= 0.0:
            raise InvalidConfigError(f"schedule.alpha0 must be positive, got {out.alpha0}")
        return out

    def build(self) -> Schedule:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return Schedule(alpha0=self.alpha0, gamma=self.gamma, offset=self.offset)


@dataclass(frozen=True)
class CompareCfg:
    taus: tuple = (1, 2, 10)
    lrs: tuple = DEFAULT_LR_GRID

    @classmethod
    def from_dict(cls, src: dict) -> "CompareCfg":
        src = dict(src)
        taus = _take(src, "taus", list(cls.taus), lambda v: tuple(int(t) for t in v), "compare")
        lrs = _take(src, "lrs", list(cls.lrs), lambda v: tuple(float(r) for r in v), "compare")
        _reject_unknown(src, "compare")
        if not taus or not lrs:
            raise InvalidConfigError("compare.taus and compare.lrs must be nonempty")
        if any(t < 1 for t in taus):
            raise InvalidConfigError(f"compare.taus must all be >= 1, got {taus}")
        return cls(taus=taus, lrs=lrs)


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment description; round-trips through to_dict/from_dict."""

    experiment: str = "linear"
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    out_dir: str = "runs/out"
    flush_interval: int = 100
    algorithm: AlgorithmCfg = field(default_factory=AlgorithmCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    teacher: TeacherCfg = field(default_factory=TeacherCfg)
    data: DataCfg = field(default_factory=DataCfg)
    optimizer: OptimizerCfg = field(default_factory=OptimizerCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    compare: CompareCfg = field(default_factory=CompareCfg)

    @classmethod
    def from_dict(cls, src: dict) -> "RunConfig":
        src = dict(src)
        out = cls(
            experiment=_take(src, "experiment", cls.experiment, str, "config"),
            seed=_take(src, "seed", cls.seed, int, "config"),
            steps=_take(src, "steps", cls.steps, int, "config"),
            batch_size=_take(src, "batch_size", cls.batch_size, int, "config"),
            out_dir=_take(src, "out_dir", cls.out_dir, str, "config"),
            flush_interval=_take(src, "flush_interval", cls.flush_interval, int, "config"),
            algorithm=AlgorithmCfg.from_dict(src.pop("algorithm", {})),
            model=ModelCfg.from_dict(src.pop("model", {})),
            teacher=TeacherCfg.from_dict(src.pop("teacher", {})),
            data=DataCfg.from_dict(src.pop("data", {})),
            optimizer=OptimizerCfg.from_dict(src.pop("optimizer", {})),
            schedule=ScheduleCfg.from_dict(src.pop("schedule", {})),
            compare=CompareCfg.from_dict(src.pop("compare", {})),
        )
        _reject_unknown(src, "config")
        if out.experiment not in EXPERIMENTS:
            raise InvalidConfigError(
                f"experiment must be one of {EXPERIMENTS}, got {out.experiment!r}")
        if out.steps < 0:
            raise InvalidConfigError(f"steps must be >= 0, got {out.steps}")
        if out.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {out.batch_size}")
        if out.flush_interval < 1:
            raise InvalidConfigError(f"flush_interval must be >= 1, got {out.flush_interval}")
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["compare"] = {"taus": list(self.compare.taus), "lrs": list(self.compare.lrs)}
        return out

    def replace(self, **kwargs) -> "RunConfig":
        merged = self.to_dict()
        merged.update(kwargs)
        return RunConfig.from_dict(merged)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidConfigError("config root must be a JSON object")
    return RunConfig.from_dict(raw)


# --- experiment assembly -----------------------------------------------------------


def build_experiment(cfg: RunConfig, stream_id: int = 0):
    """Construct (model, theta0, stream, head_kind) from a validated config."""
    teacher_rng = np.random.default_rng([cfg.seed, 11])
    init_rng = np.random.default_rng([cfg.seed, 13])
    mc, tc, dc = cfg.model, cfg.teacher, cfg.data

    if cfg.experiment == "linear":
        model = LinearRnn(mc.n_hidden, mc.n_input, mc.delta)
        spec = sample_teacher("linear-rnn", tc.n_hidden, mc.n_input, teacher_rng,
                              delta=mc.delta, w_in_std=tc.w_in_std, input_std=tc.input_std,
                              wishart_degree=tc.wishart_degree)
        stream = TeacherStream(spec, cfg.batch_size, cfg.seed, stream_id)
        head = "squared"
    elif cfg.experiment == "elman":
        model = ElmanRnn(mc.n_hidden, mc.n_input, mc.activation)
        spec = sample_teacher("elman", tc.n_hidden, mc.n_input, teacher_rng,
                              activation=tc.activation, elman_c=tc.elman_c,
                              w_in_std=tc.w_in_std, input_std=tc.input_std,
                              wishart_degree=tc.wishart_degree)
        stream = TeacherStream(spec, cfg.batch_size, cfg.seed, stream_id)
        head = "squared"
    elif cfg.experiment == "neural-sde":
        model = NeuralSde(mc.n_hidden, mc.n_input, mc.delta, mc.activation)
        spec = sample_teacher("neural-sde", tc.n_hidden, mc.n_input, teacher_rng,
                              delta=mc.delta, activation=tc.activation,
                              w_in_std=tc.w_in_std, input_std=tc.input_std,
                              wishart_degree=tc.wishart_degree)
        stream = TeacherStream(spec, cfg.batch_size, cfg.seed, stream_id)
        head = "squared"
    elif cfg.experiment == "char-nlp":
        path = Path(dc.corpus_path) if dc.corpus_path else sample_corpus_path()
        text = path.read_text(encoding="utf-8")
        if not text:
            raise InvalidConfigError(f"empty corpus file: {path}")
        vocab = build_vocab(text)
        codes = encode_text(text, vocab)
        if mc.arch == "gru":
            model = Gru(mc.n_hidden, vocab.size, n_output=vocab.size)
        else:
            model = ElmanRnn(mc.n_hidden, vocab.size, mc.activation, n_output=vocab.size)
        stream = CharCursorStream(codes, vocab.size, cfg.batch_size)
        head = "cross-entropy-softmax"
    elif cfg.experiment == "theory-rnn":
        squash = SquasherSpec(
            phi=scaled_tanh(mc.phi_scale),
            lam=scaled_tanh(mc.lam_scale) if mc.lam_scale > 0 else identity_squasher(),
        )
        model = TheoryRnn(ModelDims(mc.n_hidden, mc.n_input, mc.n_latent), squash)
        chain = make_chain(dc.chain_kind, mc.n_input, mc.n_latent, dc.chain_lip,
                           teacher_rng, noise_scale=dc.noise_scale)
        out_map = make_output_map(chain.dim, teacher_rng, gain=dc.out_gain,
                                  noise_scale=dc.out_noise)
        stream = ChainStream(chain, out_map, cfg.batch_size, cfg.seed, stream_id)
        head = "squared"
    else:  # unreachable: validated upstream
        raise InvalidConfigError(f"unknown experiment {cfg.experiment!r}")

    theta0 = model.init_params(init_rng, mc.init_scale)
    return model, theta0, stream, head


def _build_trainer(cfg: RunConfig, model, theta0, head: str):
    if cfg.algorithm.kind == "rtrl":
        state = GenericRtrlState.fresh(model, theta0, head_kind=head,
                                       batch=(cfg.batch_size,))
    else:
        state = TbpttState.fresh(model, theta0, tau=cfg.algorithm.tau, head_kind=head,
                                 batch=(cfg.batch_size,),
                                 window_mode=cfg.algorithm.window_mode)
    if cfg.optimizer.kind == "rmsprop":
        state.opt = RmspropState.zeros(model.n_params, rho=cfg.optimizer.rho,
                                       eps=cfg.optimizer.eps)
    return state


def run_experiment(cfg: RunConfig, stream_id: int = 0) -> TrainLog:
    model, theta0, stream, head = build_experiment(cfg, stream_id)
    state = _build_trainer(cfg, model, theta0, head)
    return run_training(state, stream, cfg.schedule.build(), cfg.steps)


# --- subcommands ------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out_dir=None) -> int:
    out = Path(out_dir or cfg.out_dir)
    log = run_experiment(cfg)
    write_metrics(out / "metrics.csv", log, cfg.flush_interval)
    if log.status != "ok":
        print(f"numeric failure after {log.steps_done} steps; partial metrics written",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out / 'metrics.csv'} ({log.steps_done} steps)")
    return EXIT_OK


def _final_window_mean(log: TrainLog, fraction: float = 0.1):
    if log.steps_done == 0:
        return None
    k = max(1, int(log.steps_done * fraction))
    return float(np.mean(log.losses[-k:]))


def cmd_compare(cfg: RunConfig, out_dir=None) -> int:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [("rtrl", None, lr) for lr in cfg.compare.lrs]
    cells += [("tbptt", tau, lr) for tau in cfg.compare.taus for lr in cfg.compare.lrs]
    summary_lines = []
    for idx, (kind, tau, lr) in enumerate(cells):
        cell_cfg = cfg.replace(
            algorithm={"kind": kind, "tau": tau if tau else 1,
                       "window_mode": cfg.algorithm.window_mode},
            schedule={"alpha0": lr, "gamma": cfg.schedule.gamma,
                      "offset": cfg.schedule.offset},
        )
        name = f"{kind}_lr{lr:g}" if tau is None else f"{kind}_tau{tau}_lr{lr:g}"
        log = run_experiment(cell_cfg, stream_id=idx)
        write_metrics(out / f"{name}.csv", log, cfg.flush_interval)
        record = {
            "cell": name,
            "algorithm": kind,
            "tau": tau,
            "lr": lr,
            "status": log.status,
            "steps_done": log.steps_done,
            "final_window_mean_loss": _final_window_mean(log),
        }
        summary_lines.append(json.dumps(record, sort_keys=True))
        print(summary_lines[-1])
    (out / "summary.jsonl").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_verify(suite: str, seed: int = 0) -> int:
    results = run_suite(suite, seed=seed)
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _jsonable(values) -> list:
    return [v if np.isfinite(v) else None for v in np.asarray(values, dtype=float)]


def _num(value):
    return float(value) if np.isfinite(value) else None


def cmd_analyze(metrics_path, out_path=None) -> int:
    cols = read_metrics(metrics_path)
    if len(cols["loss"]) == 0:
        raise InvalidConfigError(f"metrics file has no data rows: {metrics_path}")
    diag = convergence_diagnostics(cols["gradnorm"], cols["loss"])
    records = [
        {"metric": "gradnorm", "decile_means": _jsonable(diag.gradnorm_decile_means),
         "dyadic_means": _jsonable(diag.gradnorm_dyadic_means),
         "first_decile": _num(diag.gradnorm_first_decile),
         "final_decile": _num(diag.gradnorm_final_decile)},
        {"metric": "loss", "decile_means": _jsonable(diag.loss_decile_means),
         "dyadic_means": _jsonable(diag.loss_dyadic_means)},
        {"metric": "trend", "decreasing_fraction": diag.decreasing_fraction},
    ]
    lines = [json.dumps(r, sort_keys=True) for r in records]
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one configured training run")
    p_train.add_argument("config", help="path to the JSON config")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--steps", type=int, default=None)

    p_cmp = sub.add_parser("compare", help="grid over algorithms, windows and rates")
    p_cmp.add_argument("config", help="path to the JSON config")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--steps", type=int, default=None)

    p_ver = sub.add_parser("verify", help="run a verification suite")
    p_ver.add_argument("suite", choices=["oracles", "bounds", "constants", "contraction", "all"])
    p_ver.add_argument("--seed", type=int, default=0)

    p_an = sub.add_parser("analyze", help="windowed diagnostics over a metrics file")
    p_an.add_argument("metrics", help="path to a metrics.csv produced by train")
    p_an.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.replace(seed=args.seed)
            if args.steps is not None:
                cfg = cfg.replace(steps=args.steps)
            return cmd_train(cfg, out_dir=args.out)
        if args.command == "compare":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.replace(seed=args.seed)
            if args.steps is not None:
                cfg = cfg.replace(steps=args.steps)
            return cmd_compare(cfg, out_dir=args.out)
        if args.command == "verify":
            return cmd_verify(args.suite, seed=args.seed)
        if args.command == "analyze":
            return cmd_analyze(args.metrics, out_path=args.out)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
