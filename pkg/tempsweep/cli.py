"""
Command-line entry point. Every subcommand reads the layered settings
(dataclass defaults < --config file < flags) and writes plot-ready CSV.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from tempsweep import __version__
from tempsweep.base.exceptions import BaseSweepError, ConfigError
from tempsweep.base.utils import STREAM_INIT, stream, unique_everseen, write_csv
from tempsweep.config import SECTIONS, all_field_names, load_settings, section_fields
from tempsweep.corpus import (
    EOS,
    NUM_RESERVED,
    Sentence,
    Vocab,
    build_vocab,
    load_corpus,
    save_corpus,
)
from tempsweep.decoding import sample, write_samples
from tempsweep.metrics import (
    MetricReport,
    bleu_report,
    lm_score,
    nll_under_model,
    reverse_lm_score,
    self_bleu_report,
    unigram_nll,
    write_reports,
)
from tempsweep.model import (
    init_discriminator,
    init_params,
    load_params,
    save_params,
)
from tempsweep.sweep import (
    AUC_HEADER,
    BENCH_SIZE,
    SweepCurve,
    SweepData,
    auc,
    bench_decoding,
    entropy_drop_trace,
    run_sweep,
    run_synthetic_experiment,
    shared_window,
    split_generated,
    synthetic_data,
    train_temp_study,
    write_bench_csv,
    write_temp_study_csv,
)
from tempsweep.training import adversarial_train, gradient_check, mle_train

logger = logging.getLogger(__name__)

FIELD_PREFIX = "field__"
METRICS = ("bleu", "self-bleu", "nll", "lm", "reverse-lm", "unigram")
DEFAULT_BENCH = "ancestral:1.0,ancestral:0.7,greedy,stochastic_beam:4"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _float_list(text):
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _common_parser():
    parser = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parser.add_argument("--config", metavar="PATH", help="TOML config file")
    parser.add_argument(
        "--set",
        metavar="SECTION.FIELD=VALUE",
        action="append",
        default=[],
        help="override one field of one section",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    group = parser.add_argument_group("config overrides")
    owners = {
        name: [s for s in SECTIONS if name in {f.name for f in section_fields(s)}]
        for name in all_field_names()
    }
    for name in sorted(all_field_names()):
        group.add_argument(
            "--" + name.replace("_", "-"),
            dest=FIELD_PREFIX + name,
            metavar="VALUE",
            default=argparse.SUPPRESS,
            help="/".join(section for section in owners[name] if section != "lm"),
        )
    return parser


def _vocab(args):
    return Vocab.load(args.vocab)


def _load(path, vocab, split, settings):
    return load_corpus(path, vocab, split, settings.build("decode").max_len)


def _files_or_synthetic(args, settings):
    """(vocab, train, valid, test, oracle) from --train/--valid/--test or a fresh oracle"""
    if args.train:
        if not (args.valid and args.test and args.vocab):
            raise ConfigError("--train needs --valid, --test and --vocab")
        vocab = _vocab(args)
        return (
            vocab,
            _load(args.train, vocab, "train", settings),
            _load(args.valid, vocab, "valid", settings),
            _load(args.test, vocab, "test", settings),
            None,
        )
    data = synthetic_data(settings.build("experiment"))
    return data.vocab, data.train, data.valid, data.test, data.oracle


def cmd_oracle_gen(args, settings):
    exp = settings.build("experiment")
    data = synthetic_data(exp)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(data.oracle, out_dir / "oracle.params")
    data.vocab.save(out_dir / "vocab.txt")
    for corpus in (data.train, data.valid, data.test):
        save_corpus(corpus, out_dir / f"{corpus.split}.txt")
    logger.info("Wrote oracle and corpora to %s", out_dir)
    return 0


def cmd_train(args, settings):
    vocab_path = Path(args.vocab)
    if not vocab_path.exists() and args.max_vocab:
        lines = Path(args.train).read_text(encoding="utf-8").splitlines()
        build_vocab(lines, args.max_vocab).save(vocab_path)
        logger.info("Built vocab %s from %s", vocab_path, args.train)
    vocab = _vocab(args)
    train = _load(args.train, vocab, "train", settings)
    valid = _load(args.valid, vocab, "valid", settings)
    cfg = settings.build("train")
    if args.init:
        params = load_params(args.init)
    else:
        params = init_params(settings.build("model").dims(vocab.size), cfg.seed)
    trained, trace = mle_train(params, train, valid, cfg)
    save_params(trained, args.out)
    if args.trace:
        trace.write_csv(args.trace, settings.build("run").record_timing)
    logger.info("Best valid NLL %.4f, model written to %s", trace.best_valid_nll, args.out)
    return 0


def cmd_adv_train(args, settings):
    vocab = _vocab(args)
    train = _load(args.train, vocab, "train", settings)
    valid = _load(args.valid, vocab, "valid", settings)
    cfg = settings.build("adv")
    gen = load_params(args.gen)
    disc = load_params(args.disc) if args.disc else init_discriminator(gen.dims, cfg.seed)
    quality_model = load_params(args.quality_model) if args.quality_model else None
    gen, disc, trace = adversarial_train(
        gen,
        disc,
        train,
        valid,
        cfg,
        pretrain_cfg=settings.build("train"),
        quality_model=quality_model,
    )
    save_params(gen, args.out_gen)
    if args.out_disc:
        save_params(disc, args.out_disc)
    if args.trace:
        trace.write_csv(args.trace, settings.build("run").record_timing)
    for warning in trace.warnings:
        logger.warning(warning)
    return 0


def _decoder(settings, discriminator_path=None):
    discriminator = load_params(discriminator_path) if discriminator_path else None
    return settings.build("decode", discriminator=discriminator)


def cmd_sample(args, settings):
    model = load_params(args.model)
    cfg = _decoder(settings, args.discriminator)
    batch = sample(model, cfg, args.num_samples, settings.build("run").workers)
    path, sidecar = write_samples(batch, _vocab(args), args.out)
    logger.info(
        "Wrote %d sentences to %s (acceptance rate %.3f, metadata %s)",
        len(batch),
        path,
        batch.acceptance_rate,
        sidecar,
    )
    return 0


def _parse_metrics(text):
    metrics = unique_everseen(item.strip() for item in text.split(",") if item.strip())
    unknown = [metric for metric in metrics if metric not in METRICS]
    if unknown or not metrics:
        raise ConfigError(f"unknown metrics {unknown}, expected some of {METRICS}")
    return metrics


def _require(value, flag, metric):
    if not value:
        raise ConfigError(f"metric {metric} needs {flag}")
    return value


def cmd_eval(args, settings):
    vocab = _vocab(args)
    spec = settings.build("sweep")
    decode = _decoder(settings, args.discriminator)
    seed = decode.seed
    if args.hyp:
        hyp = _load(args.hyp, vocab, "generated", settings)
    elif args.model:
        batch = sample(load_params(args.model), decode, args.num_samples, settings.build("run").workers)
        hyp = batch.to_corpus(vocab)
    else:
        raise ConfigError("eval needs --hyp or --model")
    ref = _load(args.ref, vocab, "test", settings) if args.ref else None

    reports = []
    for metric in _parse_metrics(args.metrics):
        if metric == "bleu":
            _require(ref, "--ref", metric)
            reports.append(bleu_report(hyp, ref, spec.n, spec.epsilon, spec.reference_cap, seed))
            continue
        if metric == "self-bleu":
            reports.append(self_bleu_report(hyp, spec.n, spec.epsilon, spec.reference_cap, seed))
            continue
        if metric == "nll":
            scoring = load_params(_require(args.scoring_model, "--scoring-model", metric))
            value, references = nll_under_model(scoring, hyp), 0
        elif metric == "lm":
            real_train = _load(_require(args.real_train, "--real-train", metric), vocab, "train", settings)
            real_valid = _load(_require(args.real_valid, "--real-valid", metric), vocab, "valid", settings)
            value, references = lm_score(real_train, real_valid, hyp, settings.build("lm")), len(real_train)
        elif metric == "reverse-lm":
            _require(ref, "--ref", metric)
            value = reverse_lm_score(*split_generated(hyp), ref, settings.build("lm"))
            references = len(ref)
        else:
            _require(ref, "--ref", metric)
            real_train = _load(_require(args.real_train, "--real-train", metric), vocab, "train", settings)
            value, references = unigram_nll(real_train, ref), len(ref)
        reports.append(MetricReport(metric, value, len(hyp), references, seed=seed))
    write_reports(args.out, reports)
    for report in reports:
        logger.info("%s = %.5f", report.metric, report.value)
    return 0


def cmd_sweep(args, settings):
    vocab = _vocab(args)
    spec = settings.build("sweep")
    run = settings.build("run")
    data = SweepData(
        _load(args.train, vocab, "train", settings),
        _load(args.valid, vocab, "valid", settings),
        _load(args.test, vocab, "test", settings),
        oracle=load_params(args.oracle) if args.oracle else None,
        discriminator=load_params(args.discriminator) if args.discriminator else None,
        lm_config=settings.build("lm"),
    )
    curve = run_sweep(load_params(args.model), spec, data, run.workers)
    curve.write_csv(args.out, run.record_timing)
    for control, reason in curve.failures():
        logger.warning("Point %s failed: %s", control, reason)
    return 0


def cmd_auc(args, settings):
    curves = [SweepCurve.read_csv(path) for path in args.curves]
    if args.window:
        bounds = _float_list(args.window)
        if len(bounds) != 2:
            raise ConfigError("--window expects lo,hi")
        window = tuple(bounds)
    elif len(curves) > 1:
        window = shared_window(curves)
    else:
        window = None
    rows = []
    for curve in curves:
        value = auc(curve, window)
        if window:
            lo, hi = window
        else:
            diversities = sorted(point.diversity for point in curve.usable_points())
            lo, hi = diversities[0], diversities[-1]
        rows.append({"model": curve.model_id, "auc": value, "window_lo": lo, "window_hi": hi})
        logger.info("AUC %s: %.5f", curve.model_id, value)
    write_csv(args.out, AUC_HEADER, rows)
    return 0


def _bench_configs(text, base):
    configs = []
    for item in text.split(","):
        strategy, _, value = item.strip().partition(":")
        if strategy in ("stochastic_beam", "beam"):
            configs.append(replace(base, strategy=strategy, beam_size=int(value)))
        elif strategy in ("gen_rejection", "disc_rejection"):
            configs.append(replace(base, strategy=strategy, threshold=float(value)))
        elif strategy == "greedy":
            configs.append(replace(base, strategy=strategy, alpha=0.0))
        else:
            configs.append(replace(base, strategy=strategy, alpha=float(value or base.alpha)))
    return configs


def cmd_bench(args, settings):
    model = load_params(args.model)
    base = _decoder(settings, args.discriminator)
    try:
        configs = _bench_configs(args.strategies, base)
    except ValueError as exc:
        raise ConfigError(f"malformed --strategies {args.strategies!r}") from exc
    rows = bench_decoding(model, configs, args.num_samples, settings.build("run").workers)
    write_bench_csv(rows, args.out)
    return 0


def _check_sentence(args, vocab_size, seed):
    if args.sentence:
        ids = tuple(int(token) for token in args.sentence.split())
        return Sentence(ids + (EOS,))
    content = stream(seed, STREAM_INIT, 1).integers(NUM_RESERVED, vocab_size, size=args.length)
    return Sentence(tuple(int(token) for token in content) + (EOS,))


def cmd_grad_check(args, settings):
    exp = settings.build("experiment")
    if args.model:
        params = load_params(args.model)
    else:
        dims = settings.build("model").dims(exp.vocab_size)
        init = init_discriminator if args.kind == "disc" else init_params
        params = init(dims, exp.seed)
    sentence = _check_sentence(args, params.dims.vocab_size, exp.seed)
    report = gradient_check(params, sentence, args.tolerance, args.step)
    if args.out:
        report.write_csv(args.out)
    if report.passed:
        logger.info("Gradient check passed, max relative error %.3e", report.max_error)
        return 0
    logger.error(
        "Gradient check failed for %s (max relative error %.3e)",
        ", ".join(report.failing_blocks()),
        report.max_error,
    )
    return 1


def cmd_synthetic_experiment(args, settings):
    exp = settings.build("experiment")
    report = run_synthetic_experiment(
        exp,
        settings.build("train"),
        settings.build("adv"),
        args.out_dir,
        settings.build("run").workers,
    )
    for name, value in report.aucs.items():
        logger.info("%s AUC %.5f", name, value)
    return 0


def cmd_entropy_trace(args, settings):
    vocab, train, valid, _, _ = _files_or_synthetic(args, settings)
    seed = settings.build("experiment").seed
    dims = settings.build("model").dims(vocab.size)
    trace = entropy_drop_trace(
        init_params(dims, seed),
        init_discriminator(dims, seed),
        train,
        valid,
        settings.build("train"),
        settings.build("adv"),
    )
    trace.write_csv(args.out, settings.build("run").record_timing)
    return 0


def cmd_train_temp_study(args, settings):
    vocab, train, valid, test, _ = _files_or_synthetic(args, settings)
    seed = settings.build("experiment").seed
    rows = train_temp_study(
        _float_list(args.alpha_trains),
        settings.build("train"),
        init_params(settings.build("model").dims(vocab.size), seed),
        train,
        valid,
        test,
        n=settings.build("sweep").n,
        samples=args.num_samples,
        seed=seed,
    )
    write_temp_study_csv(rows, args.out)
    return 0


def _data_arguments(parser, required=True):
    parser.add_argument("--train", metavar="PATH", required=required, help="training corpus")
    parser.add_argument("--valid", metavar="PATH", required=required, help="validation corpus")
    parser.add_argument("--vocab", metavar="PATH", required=required, help="vocab file")


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="tempsweep",
        description="Quality-diversity evaluation of text generators by temperature sweeps",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help):
        sub = commands.add_parser(name, parents=[common], help=help, allow_abbrev=False)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("oracle-gen", cmd_oracle_gen, "random oracle LSTM plus sampled corpora")
    sub.add_argument("--out-dir", required=True, metavar="DIR")

    sub = command("train", cmd_train, "MLE training")
    _data_arguments(sub)
    sub.add_argument("--max-vocab", type=int, help="build --vocab from --train when it is missing")
    sub.add_argument("--init", metavar="PATH", help="start from these parameters")
    sub.add_argument("--out", required=True, metavar="PATH", help="trained parameters")
    sub.add_argument("--trace", metavar="PATH", help="trace CSV")

    sub = command("adv-train", cmd_adv_train, "adversarial (REINFORCE) training")
    _data_arguments(sub)
    sub.add_argument("--gen", required=True, metavar="PATH", help="generator parameters")
    sub.add_argument("--disc", metavar="PATH", help="discriminator parameters")
    sub.add_argument("--quality-model", metavar="PATH", help="scorer for select=quality")
    sub.add_argument("--out-gen", required=True, metavar="PATH")
    sub.add_argument("--out-disc", metavar="PATH")
    sub.add_argument("--trace", metavar="PATH", help="trace CSV")

    sub = command("sample", cmd_sample, "generate a corpus with one decoder")
    sub.add_argument("--model", required=True, metavar="PATH")
    sub.add_argument("--vocab", required=True, metavar="PATH")
    sub.add_argument("--discriminator", metavar="PATH", help="for disc_rejection")
    sub.add_argument("--num-samples", type=int, default=1000)
    sub.add_argument("--out", required=True, metavar="PATH")

    sub = command("eval", cmd_eval, "score a generated corpus")
    sub.add_argument("--vocab", required=True, metavar="PATH")
    sub.add_argument("--hyp", metavar="PATH", help="generated corpus")
    sub.add_argument("--model", metavar="PATH", help="sample the hypotheses from this model")
    sub.add_argument("--discriminator", metavar="PATH", help="for disc_rejection")
    sub.add_argument("--num-samples", type=int, default=1000)
    sub.add_argument("--ref", metavar="PATH", help="reference (real test) corpus")
    sub.add_argument("--metrics", default="bleu,self-bleu", help=",".join(METRICS))
    sub.add_argument("--scoring-model", metavar="PATH", help="for nll")
    sub.add_argument("--real-train", metavar="PATH", help="for lm and unigram")
    sub.add_argument("--real-valid", metavar="PATH", help="for lm")
    sub.add_argument("--out", required=True, metavar="PATH")

    sub = command("sweep", cmd_sweep, "quality-diversity curve of one model")
    _data_arguments(sub)
    sub.add_argument("--test", required=True, metavar="PATH")
    sub.add_argument("--model", required=True, metavar="PATH")
    sub.add_argument("--oracle", metavar="PATH", help="for metric_pair=oracle")
    sub.add_argument("--discriminator", metavar="PATH", help="for control=disc_rejection")
    sub.add_argument("--out", required=True, metavar="PATH")

    sub = command("auc", cmd_auc, "area under curve CSVs")
    sub.add_argument("curves", nargs="+", metavar="CURVE")
    sub.add_argument("--window", metavar="LO,HI", help="diversity window (default: shared)")
    sub.add_argument("--out", required=True, metavar="PATH")

    sub = command("bench", cmd_bench, "wall-clock cost of decoders")
    sub.add_argument("--model", required=True, metavar="PATH")
    sub.add_argument("--discriminator", metavar="PATH", help="for disc_rejection")
    sub.add_argument("--strategies", default=DEFAULT_BENCH, help="strategy:value,...")
    sub.add_argument("--num-samples", type=int, default=BENCH_SIZE)
    sub.add_argument("--out", required=True, metavar="PATH")

    sub = command("grad-check", cmd_grad_check, "finite-difference gradient check")
    sub.add_argument("--model", metavar="PATH", help="default: fresh model of [model] shape")
    sub.add_argument("--kind", choices=("gen", "disc"), default="gen")
    sub.add_argument("--sentence", help="content token ids, space separated")
    sub.add_argument("--length", type=int, default=5, help="random sentence length")
    sub.add_argument("--tolerance", type=float, default=1e-3)
    sub.add_argument("--step", type=float, default=1e-4)
    sub.add_argument("--out", metavar="PATH", help="per-block CSV")

    sub = command("synthetic-experiment", cmd_synthetic_experiment, "oracle end-to-end run")
    sub.add_argument("--out-dir", required=True, metavar="DIR")

    for name, handler, help in (
        ("entropy-trace", cmd_entropy_trace, "MLE then adversarial trace of one model"),
        ("train-temp-study", cmd_train_temp_study, "training temperature sweep"),
    ):
        sub = command(name, handler, help)
        _data_arguments(sub, required=False)
        sub.add_argument("--test", metavar="PATH")
        sub.add_argument("--out", required=True, metavar="PATH")
        if name == "train-temp-study":
            sub.add_argument("--alpha-trains", default="0.8,1.0,1.2", metavar="A,B,...")
            sub.add_argument("--num-samples", type=int, default=1000)
    return parser


def configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args)
    flat = {
        key[len(FIELD_PREFIX) :]: value
        for key, value in vars(args).items()
        if key.startswith(FIELD_PREFIX)
    }
    try:
        settings = load_settings(args.config, flat, args.set)
        return args.handler(args, settings)
    except BaseSweepError as exc:
        logger.error("%s: %s", args.command, exc)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
