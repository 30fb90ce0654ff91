import itertools
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from tempsweep.base.exceptions import (
    ConfigError,
    ModelError,
    NothingToCheck,
    NumericalOverflow,
    Phase,
    TrainingDivergence,
)
from tempsweep.base.utils import (
    STREAM_ADVERSARIAL,
    STREAM_ROLLOUT,
    STREAM_SHUFFLE,
    chunks,
    derive_seed,
    read_csv,
    stream,
    write_csv,
)
from tempsweep.corpus import BOS, DEFAULT_MAX_LEN, EOS, Sentence, pad_batch
from tempsweep.decoding import DecoderConfig, continue_sentences, sample
from tempsweep.model import (
    DiscriminatorParams,
    RnnState,
    batch_discriminate,
    batch_nll,
    disc_loss_and_gradients,
    forward_step,
    init_discriminator,
    loss_and_gradients,
    save_params,
)
from tempsweep.optim import Adam, clip_by_global_norm

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "phase", "train_nll", "valid_nll", "seconds")
SELECT_MODES = ("last", "quality", "nll_test")
QUALITY_SAMPLES = 256
GRAD_CHECK_HEADER = ("block", "relative_error", "passed")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 20
    grad_clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 3
    train_temperature: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 0
    checkpoint_dir: str = ""

    def __post_init__(self):
        # learning_rate == 0 is a frozen run
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if not self.train_temperature > 0:
            raise ConfigError("train_temperature must be positive")
        if self.grad_clip_norm < 0 or self.early_stop_patience < 0:
            raise ConfigError("grad_clip_norm and early_stop_patience must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam betas must lie in [0, 1) and adam_eps must be positive")
        if self.seed < 0 or self.checkpoint_interval < 0:
            raise ConfigError("seed and checkpoint_interval must be non-negative")


@dataclass(frozen=True)
class AdvConfig:
    rollout_count: int = 8
    pretrain_epochs: int = 0
    disc_steps_per_gen_step: int = 1
    baseline_learning_rate: float = 0.01
    entropy_bonus_weight: float = 0.0
    mle_interleave_ratio: float = 0.0
    adv_steps: int = 200
    seed: int = 0
    gen_learning_rate: float = 0.001
    disc_learning_rate: float = 0.001
    batch_size: int = 32
    grad_clip_norm: float = 5.0
    eval_interval: int = 10
    step_level: bool = True
    disc_pretrain_steps: int = 50
    disc_patience: int = 3
    collapse_window: int = 5
    select: str = "last"
    leaky_discriminator: bool = False
    checkpoint_interval: int = 0
    checkpoint_dir: str = ""

    def __post_init__(self):
        if self.rollout_count < 1:
            raise ConfigError("rollout_count must be at least 1")
        rates = (
            self.baseline_learning_rate,
            self.entropy_bonus_weight,
            self.gen_learning_rate,
            self.disc_learning_rate,
            self.grad_clip_norm,
        )
        if any(not rate >= 0 for rate in rates):
            raise ConfigError("rates and weights must be non-negative")
        if not 0.0 <= self.mle_interleave_ratio <= 1.0:
            raise ConfigError("mle_interleave_ratio must lie in [0, 1]")
        counts = (
            self.pretrain_epochs,
            self.disc_steps_per_gen_step,
            self.adv_steps,
            self.seed,
            self.disc_pretrain_steps,
            self.disc_patience,
            self.checkpoint_interval,
        )
        if any(count < 0 for count in counts):
            raise ConfigError("step counts and seed must be non-negative")
        if self.batch_size < 1 or self.eval_interval < 1 or self.collapse_window < 1:
            raise ConfigError("batch_size, eval_interval and collapse_window must be at least 1")
        if self.select not in SELECT_MODES:
            raise ConfigError(f"select must be one of {SELECT_MODES}")
        if self.leaky_discriminator:
            raise ConfigError(
                "leaky_discriminator is not supported: it needs a hierarchical "
                "manager/worker generator that reads discriminator features"
            )


@dataclass(frozen=True)
class TrainRecord:
    step: int
    phase: Phase
    train_nll: float
    valid_nll: float
    seconds: float = 0.0


class TrainTrace:
    """Ordered training records plus warnings (e.g. reward collapse)"""

    def __init__(self, records=(), warnings=()):
        self.records = []
        self.warnings = list(warnings)
        for record in records:
            self.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __str__(self):  # pragma: no cover
        return f"<{self.__class__.__name__} {len(self.records)} records>"

    def __repr__(self):  # pragma: no cover
        return self.__str__()

    def append(self, record):
        if self.records and record.step < self.records[-1].step:
            raise ConfigError("trace steps must be non-decreasing")
        if not (math.isfinite(record.train_nll) and math.isfinite(record.valid_nll)):
            raise TrainingDivergence(record.step, "non-finite NLL in trace")
        self.records.append(record)

    def add(self, step, phase, train_nll, valid_nll, seconds=0.0):
        self.append(TrainRecord(int(step), Phase(phase), float(train_nll), float(valid_nll), seconds))

    def extend(self, other, offset=0):
        for record in other:
            self.append(replace(record, step=record.step + offset))
        self.warnings.extend(other.warnings)

    def copy(self):
        return TrainTrace(self.records, self.warnings)

    @property
    def last_step(self):
        return self.records[-1].step if self.records else 0

    @property
    def best_valid_nll(self):
        return min(record.valid_nll for record in self.records)

    def phase_records(self, phase):
        return [record for record in self.records if record.phase == Phase(phase)]

    def rows(self, record_timing=False):
        for record in self.records:
            yield {
                "step": record.step,
                "phase": record.phase.value,
                "train_nll": record.train_nll,
                "valid_nll": record.valid_nll,
                "seconds": record.seconds if record_timing else 0.0,
            }

    def write_csv(self, path, record_timing=False):
        return write_csv(path, TRACE_HEADER, self.rows(record_timing))

    @classmethod
    def read_csv(cls, path):
        return cls(
            TrainRecord(
                int(row["step"]),
                Phase(row["phase"]),
                float(row["train_nll"]),
                float(row["valid_nll"]),
                float(row["seconds"]),
            )
            for row in read_csv(path)
        )


def _check_vocab(params, *corpora):
    for corpus in corpora:
        if corpus.vocab.size != params.dims.vocab_size:
            raise ModelError(
                f"corpus vocab has {corpus.vocab.size} ids, model expects {params.dims.vocab_size}"
            )


def _save_checkpoint(directory, name, params):
    path = save_params(params, Path(directory) / f"{name}.params")
    logger.info("Saved checkpoint %s", path)


def evaluate_nll(params, corpus, alpha=1.0):
    """Unweighted mean of per-sentence NLL (nats per token) over the corpus"""
    _check_vocab(params, corpus)
    return float(np.mean(batch_nll(params, corpus.sentences, alpha)))


def mle_train(params, train, valid, cfg):
    """
    Teacher-forced Adam training at `cfg.train_temperature` with early stopping
    on validation NLL. Returns the best validation parameters and the trace.
    """
    _check_vocab(params, train, valid)
    model = params.copy(
        f"mle_train seed={cfg.seed} lr={cfg.learning_rate} alpha_train={cfg.train_temperature}"
    )
    optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = stream(cfg.seed, STREAM_SHUFFLE)
    started = time.perf_counter()

    trace = TrainTrace()
    best_nll = evaluate_nll(model, valid)
    best = model.copy()
    trace.add(
        0,
        Phase.mle,
        evaluate_nll(model, train, cfg.train_temperature),
        best_nll,
        time.perf_counter() - started,
    )
    step = 0
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for indices in chunks(rng.permutation(len(train)), cfg.batch_size):
            step += 1
            batch = [train[int(i)] for i in indices]
            try:
                loss, grads = loss_and_gradients(model, batch, alpha=cfg.train_temperature)
            except NumericalOverflow as exc:
                raise TrainingDivergence(step, str(exc)) from exc
            grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
            optimizer.step(model.weights, grads)
            if not model.is_finite():
                raise TrainingDivergence(step, "parameters are not finite")
            logger.debug("step %d loss %.5f grad norm %.4f", step, loss, norm)
            losses.append(loss)

        valid_nll = evaluate_nll(model, valid)
        trace.add(step, Phase.mle, np.mean(losses), valid_nll, time.perf_counter() - started)
        logger.info(
            "Epoch %d: train %.4f valid %.4f nats/token", epoch, np.mean(losses), valid_nll
        )
        if cfg.checkpoint_interval and cfg.checkpoint_dir and epoch % cfg.checkpoint_interval == 0:
            _save_checkpoint(cfg.checkpoint_dir, f"epoch-{epoch:04d}", model)

        if valid_nll < best_nll:
            best_nll, best, since_best = valid_nll, model.copy(), 0
        else:
            since_best += 1
            if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
                logger.info("Early stop after epoch %d, best valid %.4f", epoch, best_nll)
                break
    return best, trace


class Baseline:
    """Linear value estimate b(h) = v . h + c, fitted by squared error"""

    def __init__(self, hidden_dim, learning_rate):
        self.v = np.zeros(hidden_dim)
        self.c = 0.0
        self.learning_rate = learning_rate

    def __call__(self, features):
        return features @ self.v + self.c

    def update(self, features, rewards, mask):
        if self.learning_rate == 0:
            return
        error = (self(features) - rewards) * mask
        count = mask.sum()
        self.v -= self.learning_rate * 2.0 * np.einsum("bt,bth->h", error, features) / count
        self.c -= self.learning_rate * 2.0 * float(error.sum()) / count


def disc_accuracy(disc, real, fake):
    """Fraction of real scored >= 0.5 plus fake scored < 0.5"""
    real, fake = list(real), list(fake)
    if not real and not fake:
        raise ConfigError("disc_accuracy needs at least one sentence")
    correct = 0
    if real:
        correct += int(np.sum(batch_discriminate(disc, real) >= 0.5))
    if fake:
        correct += int(np.sum(batch_discriminate(disc, fake) < 0.5))
    return correct / (len(real) + len(fake))


def rollout_reward(gen, disc, prefix, rollout_count, seed, max_len=DEFAULT_MAX_LEN, fixed_length=False):
    """
    Mean discriminator score over `rollout_count` completions of a content
    prefix. A prefix that already ends with EOS is scored as it is.
    """
    prefix = tuple(int(token) for token in prefix)
    if not prefix:
        raise ConfigError("rollout prefix needs at least one token")
    if prefix[-1] == EOS:
        return float(batch_discriminate(disc, [Sentence(prefix)])[0])
    if len(prefix) > max_len:
        raise ConfigError("rollout prefix is longer than max_len")

    state, logits = forward_step(gen, RnnState.zeros(gen.dims, 1), [BOS], step=0)
    for index, token in enumerate(prefix):
        state, logits = forward_step(gen, state, [token], step=index + 1)
    uniforms = stream(seed, STREAM_ROLLOUT).random((rollout_count, max_len - len(prefix)))
    completions = continue_sentences(
        gen,
        state.repeat(rollout_count),
        np.repeat(logits, rollout_count, axis=0),
        [prefix] * rollout_count,
        uniforms,
        1.0,
        max_len,
        fixed_length,
    )
    return float(np.mean(batch_discriminate(disc, completions)))


def step_rewards(gen, disc, sentences, rngs, max_len, fixed_length=False, step_level=True):
    """
    rewards[i, p] scores the choice of ids[p] in sentence i as the mean
    discriminator score of one completion of ids[:p + 1] per rng; the EOS
    position gets D(sentence). Also returns the generator top hidden state
    that produced each choice, for the baseline.
    """
    inputs, targets, mask = pad_batch(sentences)
    batch, width = targets.shape
    lengths = mask.sum(axis=1).astype(np.int64)
    final = batch_discriminate(disc, sentences)
    if not step_level:
        rewards = final[:, None] * mask
    else:
        rewards = np.zeros((batch, width))
        rewards[np.arange(batch), lengths - 1] = final

    features = np.zeros((batch, width, gen.dims.hidden_dim))
    state, logits = forward_step(gen, RnnState.zeros(gen.dims, batch), inputs[:, 0], step=0)
    features[:, 0] = state.top
    for t in range(1, width):
        state, logits = forward_step(gen, state, targets[:, t - 1], step=t)
        features[:, t] = state.top
        rows = np.flatnonzero(lengths > t)
        if not step_level or not rows.size:
            continue
        prefixes = [sentences[i].ids[:t] for i in rows]
        scores = np.zeros(rows.size)
        for rng in rngs:
            completions = continue_sentences(
                gen,
                state.select(rows),
                logits[rows],
                prefixes,
                rng.random((rows.size, max_len - t)),
                1.0,
                max_len,
                fixed_length,
            )
            scores += batch_discriminate(disc, completions)
        rewards[rows, t - 1] = scores / len(rngs)
    return rewards, features, mask


def decoder_for(corpus, seed=0):
    """Ancestral alpha=1 sampling shaped like `corpus` (fixed length when it is)"""
    if corpus.is_fixed_length:
        return DecoderConfig(max_len=corpus.longest, fixed_length=True, seed=seed)
    return DecoderConfig(max_len=corpus.max_len, seed=seed)


def _real_batch(corpus, rng, batch_size):
    size = min(batch_size, len(corpus))
    return [corpus[int(i)] for i in rng.choice(len(corpus), size=size, replace=False)]


def _disc_step(disc, optimizer, gen, real_corpus, template, rng, batch_size, seed, clip_norm, step):
    real = _real_batch(real_corpus, rng, batch_size)
    fake = sample(gen, replace(template, seed=seed), len(real)).sentences
    loss, grads = disc_loss_and_gradients(disc, real + fake, [1.0] * len(real) + [0.0] * len(fake))
    if not math.isfinite(loss):
        raise TrainingDivergence(step, "discriminator loss is not finite")
    grads, _ = clip_by_global_norm(grads, clip_norm)
    optimizer.step(disc.weights, grads)
    if not disc.is_finite():
        raise TrainingDivergence(step, "discriminator parameters are not finite")
    return loss, real, fake


def train_discriminator_only(gen, real, cfg, disc=None, steps=None):
    """
    Trains a discriminator on `real` against samples of the frozen generator
    until it converges: the mean loss of a window of cfg.eval_interval steps
    has not improved on the best window for cfg.disc_patience windows in a
    row. `steps` (default cfg.disc_pretrain_steps) caps the updates and
    disc_patience = 0 runs all of them.
    """
    _check_vocab(gen, real)
    disc = disc if disc is not None else init_discriminator(gen.dims, cfg.seed)
    disc = disc.copy(f"train_discriminator_only seed={cfg.seed}")
    optimizer = Adam(cfg.disc_learning_rate)
    rng = stream(cfg.seed, STREAM_ADVERSARIAL, 1)
    template = decoder_for(real)
    steps = cfg.disc_pretrain_steps if steps is None else steps
    window, best, stale = [], math.inf, 0
    for step in range(1, steps + 1):
        seed = derive_seed(cfg.seed, STREAM_ADVERSARIAL, 1, step)
        loss, batch_real, batch_fake = _disc_step(
            disc, optimizer, gen, real, template, rng, cfg.batch_size, seed, cfg.grad_clip_norm, step
        )
        window.append(loss)
        if len(window) < cfg.eval_interval and step < steps:
            continue
        mean_loss = float(np.mean(window))
        window = []
        logger.info(
            "Discriminator step %d: loss %.4f accuracy %.3f",
            step,
            mean_loss,
            disc_accuracy(disc, batch_real, batch_fake),
        )
        if mean_loss < best:
            best, stale = mean_loss, 0
        else:
            stale += 1
        if cfg.disc_patience and stale >= cfg.disc_patience:
            logger.info("Discriminator converged after %d steps", step)
            break
    return disc


def _quality_score(gen, quality_model, template, seed):
    batch = sample(gen, replace(template, seed=seed), QUALITY_SAMPLES)
    return float(np.mean(batch_nll(quality_model, batch.sentences)))


def adversarial_train(
    gen, disc, train, valid, cfg, pretrain_cfg=None, quality_model=None, trace=None
):
    """
    Alternates discriminator updates on real vs fresh fake batches with
    REINFORCE generator updates. Step-level rewards come from Monte-Carlo
    rollouts, minus a learned baseline, plus an optional entropy bonus. Each
    generator step uses the MLE loss instead with probability
    cfg.mle_interleave_ratio.

    The trace gets one `switch` row evaluating the generator the adversarial
    phase starts from, then an `adversarial` row every eval_interval steps.
    """
    _check_vocab(gen, train, valid)
    if not isinstance(disc, DiscriminatorParams):
        raise ConfigError("adversarial_train needs DiscriminatorParams")
    if cfg.select == "quality" and quality_model is None:
        raise ConfigError("select='quality' needs a quality_model")
    trace = trace.copy() if trace is not None else TrainTrace()

    if cfg.pretrain_epochs:
        pretrain_cfg = replace(pretrain_cfg or TrainConfig(seed=cfg.seed), max_epochs=cfg.pretrain_epochs)
        gen, mle_trace = mle_train(gen, train, valid, pretrain_cfg)
        trace.extend(mle_trace, offset=trace.last_step)

    gen = gen.copy(f"adversarial_train seed={cfg.seed} steps={cfg.adv_steps}")
    disc = disc.copy(f"adversarial_train seed={cfg.seed}")
    gen_optimizer = Adam(cfg.gen_learning_rate)
    disc_optimizer = Adam(cfg.disc_learning_rate)
    baseline = Baseline(gen.dims.hidden_dim, cfg.baseline_learning_rate)
    rng = stream(cfg.seed, STREAM_ADVERSARIAL)
    template = decoder_for(train)
    offset = trace.last_step
    started = time.perf_counter()

    disc_updates = 0

    def discriminator_update():
        nonlocal disc_updates
        disc_updates += 1
        seed = derive_seed(cfg.seed, STREAM_ADVERSARIAL, 0, disc_updates)
        return _disc_step(
            disc,
            disc_optimizer,
            gen,
            train,
            template,
            rng,
            cfg.batch_size,
            seed,
            cfg.grad_clip_norm,
            offset,
        )

    for _ in range(cfg.disc_pretrain_steps):
        discriminator_update()

    def selection_score(valid_nll, step):
        if cfg.select == "nll_test":
            return valid_nll
        if cfg.select == "quality":
            seed = derive_seed(cfg.seed, STREAM_ADVERSARIAL, 2, step)
            return _quality_score(gen, quality_model, template, seed)
        return 0.0

    valid_nll = evaluate_nll(gen, valid)
    trace.add(
        offset, Phase.switch, evaluate_nll(gen, train), valid_nll, time.perf_counter() - started
    )
    logger.info("Adversarial phase starts at step %d, valid %.4f", offset, valid_nll)
    best_score, best = selection_score(valid_nll, 0), gen.copy()

    real_nlls = []
    perfect_streak = 0
    disc_batch = None
    for step in range(1, cfg.adv_steps + 1):
        for _ in range(cfg.disc_steps_per_gen_step):
            _, disc_real, disc_fake = discriminator_update()
            disc_batch = (disc_real, disc_fake)

        real = _real_batch(train, rng, cfg.batch_size)
        if rng.random() < cfg.mle_interleave_ratio:
            loss, grads = loss_and_gradients(gen, real)
        else:
            seed = derive_seed(cfg.seed, STREAM_ADVERSARIAL, 1, step)
            fakes = sample(gen, replace(template, seed=seed), cfg.batch_size).sentences
            rollout_rngs = [
                stream(cfg.seed, STREAM_ROLLOUT, step, index) for index in range(cfg.rollout_count)
            ]
            rewards, features, mask = step_rewards(
                gen, disc, fakes, rollout_rngs, template.max_len, template.fixed_length, cfg.step_level
            )
            advantages = (rewards - baseline(features)) * mask
            baseline.update(features, rewards, mask)
            entropy_weights = None
            if cfg.entropy_bonus_weight:
                entropy_weights = cfg.entropy_bonus_weight * mask / mask.sum()
            try:
                loss, grads = loss_and_gradients(
                    gen,
                    fakes,
                    token_weights=advantages / len(fakes),
                    entropy_weights=entropy_weights,
                )
            except NumericalOverflow as exc:
                raise TrainingDivergence(offset + step, str(exc)) from exc
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
        gen_optimizer.step(gen.weights, grads)
        if not gen.is_finite():
            raise TrainingDivergence(offset + step, "generator parameters are not finite")
        real_nlls.append(float(np.mean(batch_nll(gen, real))))
        logger.debug("adversarial step %d loss %.5f", step, loss)

        if step % cfg.eval_interval == 0 or step == cfg.adv_steps:
            valid_nll = evaluate_nll(gen, valid)
            trace.add(
                offset + step,
                Phase.adversarial,
                np.mean(real_nlls),
                valid_nll,
                time.perf_counter() - started,
            )
            real_nlls = []
            accuracy = disc_accuracy(disc, *disc_batch) if disc_batch else float("nan")
            logger.info(
                "Adversarial step %d: valid %.4f discriminator accuracy %.3f",
                step,
                valid_nll,
                accuracy,
            )
            perfect_streak = perfect_streak + 1 if accuracy == 1.0 else 0
            if perfect_streak == cfg.collapse_window:
                message = (
                    f"reward collapse: discriminator accuracy 1.0 for {cfg.collapse_window} "
                    f"evaluations ending at step {offset + step}"
                )
                trace.warnings.append(message)
                logger.warning(message)
            if cfg.select != "last":
                score = selection_score(valid_nll, step)
                if score < best_score:
                    best_score, best = score, gen.copy()
        if cfg.checkpoint_interval and cfg.checkpoint_dir and step % cfg.checkpoint_interval == 0:
            _save_checkpoint(cfg.checkpoint_dir, f"adv-{offset + step:06d}", gen)

    if cfg.select != "last":
        gen = best
    return gen, disc, trace


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    step: float

    @property
    def max_error(self):
        return max(self.errors.values())

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def failing_blocks(self):
        return [name for name, error in self.errors.items() if error >= self.tolerance]

    def rows(self):
        for name in sorted(self.errors):
            yield {
                "block": name,
                "relative_error": self.errors[name],
                "passed": self.errors[name] < self.tolerance,
            }

    def write_csv(self, path):
        return write_csv(path, GRAD_CHECK_HEADER, self.rows())


def _relative_error(analytic, numeric):
    denominator = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denominator == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denominator)


def gradient_check(params, sentence, tolerance=1e-3, step=1e-4, grad_fn=None):
    """
    Compares analytic gradients with central finite differences for every
    block; the error is ||a - n|| / (||a|| + ||n||). Works for generators
    (mean per-token NLL) and discriminators (BCE with label 1).
    """
    ids = sentence.ids if isinstance(sentence, Sentence) else tuple(sentence)
    if not [token for token in ids if token != EOS]:
        raise NothingToCheck()
    sentences = [sentence if isinstance(sentence, Sentence) else Sentence(ids)]

    if isinstance(params, DiscriminatorParams):
        grad_fn = grad_fn or (lambda p, s: disc_loss_and_gradients(p, s, [1.0] * len(s)))
        loss_fn = lambda p: disc_loss_and_gradients(p, sentences, [1.0])[0]
    else:
        grad_fn = grad_fn or loss_and_gradients
        loss_fn = lambda p: float(np.mean(batch_nll(p, sentences)))

    perturbed = params.copy()
    _, analytic = grad_fn(perturbed, sentences)
    errors = {}
    for name in perturbed.block_names:
        block = perturbed.weights[name]
        numeric = np.zeros_like(block)
        for index in np.ndindex(block.shape):
            original = block[index]
            block[index] = original + step
            plus = loss_fn(perturbed)
            block[index] = original - step
            minus = loss_fn(perturbed)
            block[index] = original
            numeric[index] = (plus - minus) / (2.0 * step)
        errors[name] = _relative_error(analytic[name], numeric)
        logger.debug("gradient check %s: %.3e", name, errors[name])
    return GradCheckReport(errors, tolerance, step)


@dataclass
class GridResult:
    config: TrainConfig
    valid_nll: float
    steps: int
    params: object = field(repr=False, default=None)


def grid_search(params, train, valid, base_cfg, grid):
    """
    mle_train over the cartesian product of `grid` ({field: [values]}),
    sorted by best validation NLL (ties keep grid order).
    """
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(grid) - known)
    if unknown:
        raise ConfigError(f"unknown TrainConfig fields in grid: {unknown}")
    names = list(grid)
    results = []
    for values in itertools.product(*(grid[name] for name in names)):
        cfg = replace(base_cfg, **dict(zip(names, values)))
        trained, trace = mle_train(params, train, valid, cfg)
        results.append(GridResult(cfg, trace.best_valid_nll, trace.last_step, trained))
        logger.info("Grid point %s: valid %.4f", dict(zip(names, values)), trace.best_valid_nll)
    return sorted(results, key=lambda result: result.valid_nll)
