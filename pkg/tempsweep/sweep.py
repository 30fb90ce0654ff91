"""
Temperature sweeps and the experiments built on them. Every artifact is a CSV
with a fixed header. `seconds` columns are written as 0.0 unless
record_timing is set, so repeated runs give identical bytes.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from tempsweep.base.exceptions import BaseSweepError, ConfigError, MetricError, PointStatus
from tempsweep.base.utils import (
    STREAM_POINT,
    STREAM_SPLIT,
    derive_seed,
    mean_and_se,
    read_csv,
    write_csv,
)
from tempsweep.corpus import Corpus, synthetic_vocab
from tempsweep.decoding import DecoderConfig, sample
from tempsweep.metrics import (
    BLEU_EPSILON,
    DEFAULT_LM_CONFIG,
    REFERENCE_CAP,
    bleu_n,
    lm_score,
    nll_under_model,
    nll_with_se,
    reverse_lm_score,
    self_bleu_n,
    train_scoring_lm,
    unigram_nll,
)
from tempsweep.model import ModelDims, init_discriminator, init_params, make_oracle, save_params
from tempsweep.training import (
    AdvConfig,
    TrainConfig,
    adversarial_train,
    evaluate_nll,
    mle_train,
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.6, 0.5, 0.4, 0.2, 0.05, 0.001)
TABLE_ALPHAS = (1.0, 0.4, 0.001)
CONTROLS = ("temperature", "beam", "gen_rejection", "disc_rejection")
METRIC_PAIRS = ("bleu", "lm", "oracle")
MIN_SAMPLES_PER_POINT = 100
BENCH_SIZE = 2000

CURVE_HEADER = (
    "control",
    "quality",
    "diversity",
    "quality_se",
    "diversity_se",
    "seconds",
    "samples",
    "seed",
    "flag",
)
TABLE_HEADER = ("model", "alpha", "nll_oracle", "nll_oracle_se", "samples")
AUC_HEADER = ("model", "auc", "window_lo", "window_hi")
BENCH_HEADER = (
    "strategy",
    "control",
    "samples",
    "seconds",
    "attempts",
    "acceptance_rate",
    "mean_loglik",
)
TEMP_STUDY_HEADER = ("alpha_train", "quality", "diversity", "valid_nll", "samples", "seed")


@dataclass(frozen=True)
class SweepSpec:
    """
    One control knob swept over `values`, ordered from most to least entropy:
    temperature descending, beam size and both thresholds ascending.
    """

    control: str = "temperature"
    values: tuple = DEFAULT_ALPHAS
    metric_pair: str = "bleu"
    samples_per_point: int = 1000
    seeds: tuple = (0, 1, 2)
    n: int = 5
    max_len: int = 52
    fixed_length: bool = False
    max_attempts: int = 1000
    epsilon: float = BLEU_EPSILON
    reference_cap: int = REFERENCE_CAP
    range_rules: bool = True

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "seeds", tuple(int(seed) for seed in self.seeds))
        if self.control not in CONTROLS:
            raise ConfigError(f"unknown control {self.control!r}, expected one of {CONTROLS}")
        if self.metric_pair not in METRIC_PAIRS:
            raise ConfigError(f"unknown metric pair {self.metric_pair!r}, expected one of {METRIC_PAIRS}")
        if not self.values:
            raise ConfigError("a sweep needs at least one control value")
        if not self.seeds or any(seed < 0 for seed in self.seeds):
            raise ConfigError("a sweep needs non-negative seeds")
        if self.samples_per_point < MIN_SAMPLES_PER_POINT:
            raise ConfigError(f"samples_per_point must be at least {MIN_SAMPLES_PER_POINT}")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        steps = list(zip(self.values, self.values[1:]))
        if self.control == "temperature":
            ordered = all(a > b for a, b in steps)
            order = "descending"
        else:
            ordered = all(a < b for a, b in steps)
            order = "ascending"
        if not ordered:
            raise ConfigError(f"{self.control} values must be strictly {order}")

    def decoder(self, value, seed, discriminator=None):
        common = dict(
            max_len=self.max_len,
            fixed_length=self.fixed_length,
            seed=seed,
            max_attempts=self.max_attempts,
        )
        if self.control == "temperature":
            return DecoderConfig("ancestral", alpha=value, **common)
        if self.control == "beam":
            return DecoderConfig("stochastic_beam", beam_size=int(value), **common)
        if self.control == "gen_rejection":
            return DecoderConfig("gen_rejection", threshold=value, **common)
        return DecoderConfig("disc_rejection", threshold=value, discriminator=discriminator, **common)


@dataclass
class SweepData:
    """Corpora and models the metric pairs read; `vocab` comes from real_train"""

    real_train: Corpus
    real_valid: Corpus
    real_test: Corpus
    oracle: object = None
    discriminator: object = None
    lm_config: TrainConfig = DEFAULT_LM_CONFIG
    scoring_model: object = None
    unigram_bound: Optional[float] = None

    @property
    def vocab(self):
        return self.real_train.vocab

    def lm_scorer(self):
        if self.scoring_model is None:
            self.scoring_model = train_scoring_lm(self.real_train, self.real_valid, self.lm_config)
        return self.scoring_model

    def unigram(self):
        if self.unigram_bound is None:
            self.unigram_bound = unigram_nll(self.real_train, self.real_test, include_eos=True)
        return self.unigram_bound


@dataclass(frozen=True)
class SweepPoint:
    control: float
    quality: float
    diversity: float
    quality_se: float = 0.0
    diversity_se: float = 0.0
    seconds: float = 0.0
    samples: int = 0
    seeds: tuple = ()
    flag: PointStatus = PointStatus.ok
    reason: str = ""

    @property
    def usable(self):
        """Only ok points enter auc and shared_window"""
        return self.flag == PointStatus.ok

    def row(self, record_timing=False):
        return {
            "control": self.control,
            "quality": self.quality,
            "diversity": self.diversity,
            "quality_se": self.quality_se,
            "diversity_se": self.diversity_se,
            "seconds": self.seconds if record_timing else 0.0,
            "samples": self.samples,
            "seed": ";".join(str(seed) for seed in self.seeds),
            "flag": self.flag.value,
        }


@dataclass
class SweepCurve:
    points: list
    model_id: str = ""
    spec: Optional[SweepSpec] = None

    def __post_init__(self):
        if not self.points:
            raise ConfigError("a curve needs at least one point")

    def __len__(self):
        return len(self.points)

    def usable_points(self):
        return [point for point in self.points if point.usable]

    def failures(self):
        return [
            (point.control, point.reason) for point in self.points if point.flag == PointStatus.failed
        ]

    def write_csv(self, path, record_timing=False):
        return write_csv(path, CURVE_HEADER, (point.row(record_timing) for point in self.points))

    @classmethod
    def read_csv(cls, path):
        points = [
            SweepPoint(
                control=float(row["control"]),
                quality=float(row["quality"]),
                diversity=float(row["diversity"]),
                quality_se=float(row["quality_se"]),
                diversity_se=float(row["diversity_se"]),
                seconds=float(row["seconds"]),
                samples=int(row["samples"]),
                seeds=tuple(int(seed) for seed in row["seed"].split(";") if seed),
                flag=PointStatus(row["flag"]),
            )
            for row in read_csv(path)
        ]
        return cls(points, model_id=Path(path).stem)


def write_curve_csv(curve, path, record_timing=False):
    return curve.write_csv(path, record_timing)


def read_curve_csv(path):
    return SweepCurve.read_csv(path)


def split_generated(corpus):
    n_valid = max(1, len(corpus) // 10)
    sentences = corpus.sentences
    return (
        corpus.with_sentences(sentences[:-n_valid], "train"),
        corpus.with_sentences(sentences[-n_valid:], "valid"),
    )


def _metric_pair(model, spec, data, cfg, generated):
    """Returns (quality, diversity) for one sampled corpus; lower quality is better"""
    if spec.metric_pair == "bleu":
        quality = -bleu_n(generated, data.real_test, spec.n, spec.epsilon, spec.reference_cap, cfg.seed)
        diversity = self_bleu_n(generated, spec.n, spec.epsilon, spec.reference_cap, cfg.seed)
    elif spec.metric_pair == "lm":
        quality = lm_score(data.real_train, data.real_valid, generated, scoring_model=data.lm_scorer())
        diversity = reverse_lm_score(*split_generated(generated), data.real_test, data.lm_config)
    else:
        if data.oracle is None:
            raise ConfigError("the oracle metric pair needs an oracle")
        quality = nll_under_model(data.oracle, generated)
        diversity = evaluate_nll(model, data.real_test, cfg.alpha)
    return quality, diversity


def _flag(spec, data, value, diversity):
    if not spec.range_rules:
        return PointStatus.ok
    if spec.control == "temperature" and value > 1.0:
        return PointStatus.above_diversity_ceiling
    if spec.metric_pair == "lm" and diversity >= data.unigram():
        return PointStatus.below_quality_floor
    return PointStatus.ok


def _run_point(model, spec, data, indexed_value):
    index, value = indexed_value
    qualities, diversities, seconds = [], [], []
    try:
        for seed in spec.seeds:
            cfg = spec.decoder(value, derive_seed(seed, STREAM_POINT, index), data.discriminator)
            batch = sample(model, cfg, spec.samples_per_point)
            generated = Corpus(batch.sentences, data.vocab, "generated", spec.max_len)
            quality, diversity = _metric_pair(model, spec, data, cfg, generated)
            qualities.append(quality)
            diversities.append(diversity)
            seconds.append(batch.elapsed_seconds)
    except BaseSweepError as exc:
        logger.warning("Sweep point %s=%s failed: %s", spec.control, value, exc)
        return SweepPoint(
            value,
            math.nan,
            math.nan,
            math.nan,
            math.nan,
            samples=spec.samples_per_point,
            seeds=spec.seeds,
            flag=PointStatus.failed,
            reason=str(exc),
        )

    quality, quality_se = mean_and_se(qualities)
    diversity, diversity_se = mean_and_se(diversities)
    flag = _flag(spec, data, value, diversity)
    if flag != PointStatus.ok:
        logger.warning("Sweep point %s=%s flagged %s", spec.control, value, flag.value)
    logger.info(
        "Sweep point %s=%s: quality %.4f diversity %.4f", spec.control, value, quality, diversity
    )
    return SweepPoint(
        value,
        quality,
        diversity,
        quality_se,
        diversity_se,
        float(np.mean(seconds)),
        spec.samples_per_point,
        spec.seeds,
        flag,
    )


def run_sweep(model, spec, data, workers=1):
    """
    Samples every control value under every seed and scores the metric pair.
    Points keep the order of `spec.values`; failed and flagged points stay in the curve.
    """
    if model.dims.vocab_size != data.vocab.size:
        raise MetricError("model and sweep corpora do not share one vocab")
    if spec.metric_pair == "lm":
        data.lm_scorer()
    if spec.range_rules and spec.metric_pair == "lm":
        data.unigram()

    run = partial(_run_point, model, spec, data)
    jobs = list(enumerate(spec.values))
    if workers > 1:
        points = Parallel(n_jobs=workers, prefer="threads")(delayed(run)(job) for job in jobs)
    else:
        points = [run(job) for job in jobs]
    return SweepCurve(points, model_id=model.fingerprint(), spec=spec)


def _curve_xy(curve):
    if isinstance(curve, SweepCurve):
        pairs = [(point.diversity, point.quality) for point in curve.usable_points()]
    else:
        pairs = [(float(d), float(q)) for d, q in curve]
    pairs = [(d, q) for d, q in pairs if math.isfinite(d) and math.isfinite(q)]
    merged = {}
    for diversity, quality in pairs:
        merged.setdefault(diversity, []).append(quality)
    xs = np.array(sorted(merged))
    ys = np.array([np.mean(merged[x]) for x in xs])
    return xs, ys


def auc(curve, diversity_window=None):
    """
    Trapezoidal area of quality over diversity inside `diversity_window`,
    interpolating linearly at the edges. Point order does not matter.
    """
    xs, ys = _curve_xy(curve)
    if xs.size < 2:
        raise MetricError("auc needs at least 2 usable points")
    lo, hi = diversity_window if diversity_window is not None else (xs[0], xs[-1])
    lo, hi = max(float(lo), xs[0]), min(float(hi), xs[-1])
    if not lo < hi:
        raise MetricError("the diversity window does not overlap the curve")
    grid = np.concatenate([[lo], xs[(xs > lo) & (xs < hi)], [hi]])
    values = np.interp(grid, xs, ys)
    return float(np.sum(np.diff(grid) * (values[1:] + values[:-1]) / 2.0))


def shared_window(curves):
    """Overlap of the curves' diversity ranges"""
    ranges = []
    for curve in curves:
        xs, _ = _curve_xy(curve)
        if xs.size < 2:
            raise MetricError("every curve needs at least 2 usable points")
        ranges.append((xs[0], xs[-1]))
    lo = max(low for low, _ in ranges)
    hi = min(high for _, high in ranges)
    if not lo < hi:
        raise MetricError("the curves' diversity ranges do not overlap")
    return float(lo), float(hi)


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int = 100
    seq_len: int = 20
    train_size: int = 10000
    valid_size: int = 1000
    test_size: int = 1000
    oracle_seed: int = 0
    seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 32
    num_layers: int = 1
    alphas: tuple = DEFAULT_ALPHAS
    table_alphas: tuple = TABLE_ALPHAS
    table_samples: int = 2000
    samples_per_point: int = 500
    seeds: tuple = (0, 1, 2)
    adversarial: bool = True
    record_timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))
        object.__setattr__(self, "table_alphas", tuple(self.table_alphas))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.seq_len < 1:
            raise ConfigError("seq_len must be at least 1")
        if min(self.train_size, self.valid_size, self.test_size, self.table_samples) < 1:
            raise ConfigError("corpus and sample sizes must be positive")
        if any(not alpha > 0 for alpha in self.table_alphas):
            raise ConfigError("table alphas must be positive")


@dataclass
class SyntheticData:
    oracle: object
    vocab: object
    train: Corpus
    valid: Corpus
    test: Corpus


def synthetic_data(exp):
    """Oracle plus fixed-length train/valid/test corpora sampled from it"""
    oracle = make_oracle(exp.vocab_size, exp.oracle_seed)
    vocab = synthetic_vocab(exp.vocab_size)
    corpora = []
    for index, (split, size) in enumerate(
        (("train", exp.train_size), ("valid", exp.valid_size), ("test", exp.test_size))
    ):
        cfg = DecoderConfig(
            max_len=exp.seq_len,
            fixed_length=True,
            seed=derive_seed(exp.seed, STREAM_SPLIT, index),
        )
        batch = sample(oracle, cfg, size)
        corpora.append(Corpus(batch.sentences, vocab, split, exp.seq_len))
    logger.info("Sampled synthetic corpora of %d/%d/%d sentences", *(len(c) for c in corpora))
    return SyntheticData(oracle, vocab, *corpora)


@dataclass
class ExperimentReport:
    table: list
    curves: dict
    aucs: dict
    window: tuple
    traces: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def table_value(self, model, alpha):
        for row in self.table:
            if row["model"] == model and row["alpha"] == alpha:
                return row["nll_oracle"], row["nll_oracle_se"]
        raise KeyError((model, alpha))


def _table_rows(name, model, data, exp):
    rows = []
    for index, alpha in enumerate(exp.table_alphas):
        cfg = DecoderConfig(
            alpha=alpha,
            max_len=exp.seq_len,
            fixed_length=True,
            seed=derive_seed(exp.seed, STREAM_POINT, 1000 + index),
        )
        batch = sample(model, cfg, exp.table_samples)
        generated = Corpus(batch.sentences, data.vocab, "generated", exp.seq_len)
        value, se = nll_with_se(data.oracle, generated)
        rows.append(
            {"model": name, "alpha": alpha, "nll_oracle": value, "nll_oracle_se": se, "samples": len(batch)}
        )
        logger.info("%s alpha=%s NLL_oracle %.4f (se %.4f)", name, alpha, value, se)
    return rows


def run_synthetic_experiment(exp, train_cfg=None, adv_cfg=None, out_dir=None, workers=1):
    """
    oracle -> sampled corpora -> MLE student (-> adversarial student) ->
    (NLL_oracle, NLL_test) temperature sweeps, NLL_oracle table and AUCs
    over the shared diversity window.
    """
    train_cfg = train_cfg or TrainConfig(seed=exp.seed)
    adv_cfg = adv_cfg or AdvConfig(seed=exp.seed)
    data = synthetic_data(exp)
    dims = ModelDims(exp.vocab_size, exp.embed_dim, exp.hidden_dim, exp.num_layers)

    models, traces = {}, {}
    models["mle"], traces["mle"] = mle_train(init_params(dims, exp.seed), data.train, data.valid, train_cfg)
    if exp.adversarial:
        disc = init_discriminator(dims, exp.seed)
        models["adversarial"], _, traces["adversarial"] = adversarial_train(
            models["mle"],
            disc,
            data.train,
            data.valid,
            adv_cfg,
            quality_model=data.oracle,
        )

    spec = SweepSpec(
        control="temperature",
        values=exp.alphas,
        metric_pair="oracle",
        samples_per_point=exp.samples_per_point,
        seeds=exp.seeds,
        max_len=exp.seq_len,
        fixed_length=True,
    )
    sweep_data = SweepData(data.train, data.valid, data.test, oracle=data.oracle)
    curves = {name: run_sweep(model, spec, sweep_data, workers) for name, model in models.items()}

    table = []
    for name, model in models.items():
        table.extend(_table_rows(name, model, data, exp))

    if len(curves) > 1:
        window = shared_window(list(curves.values()))
    else:
        xs, _ = _curve_xy(next(iter(curves.values())))
        window = (float(xs[0]), float(xs[-1]))
    aucs = {name: auc(curve, window) for name, curve in curves.items()}
    for name, value in aucs.items():
        logger.info("AUC %s over [%.4f, %.4f]: %.5f", name, window[0], window[1], value)

    report = ExperimentReport(table, curves, aucs, window, traces, models)
    if out_dir is not None:
        write_experiment(report, data, out_dir, exp.record_timing)
    return report


def write_experiment(report, data, out_dir, record_timing=False):
    out_dir = Path(out_dir)
    write_csv(out_dir / "table.csv", TABLE_HEADER, report.table)
    auc_rows = [
        {"model": name, "auc": value, "window_lo": report.window[0], "window_hi": report.window[1]}
        for name, value in report.aucs.items()
    ]
    write_csv(out_dir / "auc.csv", AUC_HEADER, auc_rows)
    for name, curve in report.curves.items():
        curve.write_csv(out_dir / f"curve-{name}.csv", record_timing)
    for name, trace in report.traces.items():
        trace.write_csv(out_dir / f"trace-{name}.csv", record_timing)
    save_params(data.oracle, out_dir / "oracle.params")
    for name, model in report.models.items():
        save_params(model, out_dir / f"{name}.params")
    logger.info("Wrote experiment artifacts to %s", out_dir)
    return out_dir


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    control: float
    samples: int
    seconds: float
    attempts: int
    acceptance_rate: float
    mean_loglik: float

    def row(self):
        return {
            "strategy": self.strategy,
            "control": self.control,
            "samples": self.samples,
            "seconds": self.seconds,
            "attempts": self.attempts,
            "acceptance_rate": self.acceptance_rate,
            "mean_loglik": self.mean_loglik,
        }


def bench_decoding(model, configs, n=BENCH_SIZE, workers=1):
    """
    Wall-clock cost of drawing n sentences per decoder config. mean_loglik
    lets rows be compared at matched quality.
    """
    if n < MIN_SAMPLES_PER_POINT:
        raise ConfigError(f"bench needs at least {MIN_SAMPLES_PER_POINT} sentences")
    rows = []
    for cfg in configs:
        started = time.perf_counter()
        batch = sample(model, cfg, n, workers=workers)
        seconds = time.perf_counter() - started
        rows.append(
            BenchRow(
                cfg.strategy,
                cfg.control_value,
                len(batch),
                seconds,
                batch.attempts,
                batch.acceptance_rate,
                batch.mean_loglik,
            )
        )
        logger.info("Bench %s: %.3fs for %d sentences", cfg.label, seconds, n)
    return rows


def write_bench_csv(rows, path):
    return write_csv(path, BENCH_HEADER, (row.row() for row in rows))


def entropy_drop_trace(gen, disc, train, valid, pretrain_cfg, adv_cfg):
    """
    MLE phase then adversarial phase on one model, in one trace. A single
    `switch` row marks the start of adversarial training; with adv_steps=0
    the result is the pure MLE trace.
    """
    gen, trace = mle_train(gen, train, valid, pretrain_cfg)
    if adv_cfg.adv_steps == 0:
        return trace
    _, _, trace = adversarial_train(
        gen, disc, train, valid, replace(adv_cfg, pretrain_epochs=0), trace=trace
    )
    return trace


@dataclass(frozen=True)
class TempStudyRow:
    alpha_train: float
    quality: float
    diversity: float
    valid_nll: float
    samples: int
    seed: int

    def row(self):
        return {
            "alpha_train": self.alpha_train,
            "quality": self.quality,
            "diversity": self.diversity,
            "valid_nll": self.valid_nll,
            "samples": self.samples,
            "seed": self.seed,
        }


def train_temp_study(alpha_trains, base_cfg, params, train, valid, test, n=5, samples=1000, seed=0):
    """
    One model per training temperature, all else fixed, each scored at
    inference alpha=1 on (-BLEU-n, Self-BLEU-n) against `test`.
    """
    if any(not alpha > 0 for alpha in alpha_trains):
        raise ConfigError("training temperatures must be positive")
    decoder = DecoderConfig(
        max_len=train.longest if train.is_fixed_length else train.max_len,
        fixed_length=train.is_fixed_length,
        seed=seed,
    )
    rows = []
    for alpha_train in alpha_trains:
        trained, _ = mle_train(params, train, valid, replace(base_cfg, train_temperature=alpha_train))
        batch = sample(trained, decoder, samples)
        generated = Corpus(batch.sentences, train.vocab, "generated", train.max_len)
        row = TempStudyRow(
            alpha_train,
            -bleu_n(generated, test, n, seed=seed),
            self_bleu_n(generated, n, seed=seed),
            evaluate_nll(trained, valid),
            samples,
            seed,
        )
        logger.info("alpha_train=%s: quality %.4f diversity %.4f", alpha_train, row.quality, row.diversity)
        rows.append(row)
    return rows


def write_temp_study_csv(rows, path):
    return write_csv(path, TEMP_STUDY_HEADER, (row.row() for row in rows))
