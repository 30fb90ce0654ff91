import itertools
import math
from collections import defaultdict

import numpy as np

from tempsweep.corpus import BOS, EOS, PAD, UNK, Corpus, Sentence, synthetic_vocab
from tempsweep.model import (
    ModelDims,
    RnnState,
    conditional_dist,
    forward_step,
    init_discriminator,
    init_params,
)


def toy_model(vocab_size=6, embed_dim=4, hidden_dim=4, num_layers=1, seed=0, scale=0.5):
    return init_params(ModelDims(vocab_size, embed_dim, hidden_dim, num_layers), seed, scale)


def toy_discriminator(vocab_size=6, embed_dim=4, hidden_dim=4, num_layers=1, seed=0, scale=0.5):
    return init_discriminator(ModelDims(vocab_size, embed_dim, hidden_dim, num_layers), seed, scale)


def toy_corpus(rows, vocab=None, split="train", max_len=52):
    """Corpus of content id rows; content ids start at 4 (t0)"""
    vocab = vocab or synthetic_vocab(max(max(row) for row in rows) + 1)
    return Corpus([Sentence(tuple(row) + (EOS,)) for row in rows], vocab, split, max_len)


def pattern_corpus(vocab_size=6, copies=40, split="train"):
    """Two alternating patterns, easy to learn"""
    first = tuple(4 + i % (vocab_size - 4) for i in range(4))
    second = tuple(reversed(first))
    return toy_corpus([first, second] * copies, synthetic_vocab(vocab_size), split)


def allowed_tokens(step, vocab_size, max_len, fixed_length):
    banned = {PAD, BOS, UNK}
    if step == 0 or (fixed_length and step < max_len):
        banned.add(EOS)
    return [token for token in range(vocab_size) if token not in banned]


def exact_distribution(params, max_len, alpha=1.0, fixed_length=False):
    """Probability of every sentence the masked tempered sampler can emit"""
    vocab_size = params.dims.vocab_size
    result = defaultdict(float)

    def walk(prefix, state, logits, prob):
        step = len(prefix)
        if step == max_len:
            result[prefix + (EOS,)] += prob
            return
        allowed = allowed_tokens(step, vocab_size, max_len, fixed_length)
        probs = conditional_dist(logits[allowed], alpha)
        for token, p in zip(allowed, probs):
            if p == 0:
                continue
            if token == EOS:
                result[prefix + (EOS,)] += prob * p
                continue
            next_state, next_logits = forward_step(params, state, [token])
            walk(prefix + (token,), next_state, next_logits[0], prob * p)

    state, logits = forward_step(params, RnnState.zeros(params.dims, 1), [BOS])
    walk((), state, logits[0], 1.0)
    return dict(result)


def _prefix_logits(params, prefix):
    state, logits = forward_step(params, RnnState.zeros(params.dims, 1), [BOS])
    for token in prefix:
        state, logits = forward_step(params, state, [token])
    return logits[0]


def _ordered_draws(tokens, probs, size):
    """Every ordered draw of `size` distinct tokens without replacement, with its probability"""
    if size == 0:
        yield (), 1.0
        return
    total = sum(probs)
    for i, (token, p) in enumerate(zip(tokens, probs)):
        if p == 0:
            continue
        rest = tokens[:i] + tokens[i + 1 :], probs[:i] + probs[i + 1 :]
        for tail, q in _ordered_draws(*rest, size - 1):
            yield (token,) + tail, p / total * q


def exact_stochastic_beam(params, beam_size, max_len, alpha=1.0, fixed_length=False):
    """Output distribution of the stochastic beam decoder over every possible draw"""
    vocab_size = params.dims.vocab_size
    result = defaultdict(float)

    def children(ids, score):
        logits = _prefix_logits(params, ids)
        allowed = allowed_tokens(len(ids), vocab_size, max_len, fixed_length)
        probs = [float(p) for p in conditional_dist(logits[allowed], alpha)]
        scores = np.log(conditional_dist(logits, 1.0))
        size = min(beam_size, sum(1 for p in probs if p > 0))
        return [
            ([(ids + (t,), score + scores[t], t == EOS) for t in tokens], q)
            for tokens, q in _ordered_draws(allowed, probs, size)
        ]

    def walk(beam, step, prob):
        if step == max_len or all(done for _, _, done in beam):
            for ids, _, done in beam:
                result[ids if done else ids + (EOS,)] += prob / len(beam)
            return
        options = [[([hyp], 1.0)] if hyp[2] else children(hyp[0], hyp[1]) for hyp in beam]
        for combination in itertools.product(*options):
            candidates = [hyp for hyps, _ in combination for hyp in hyps]
            q = math.prod(p for _, p in combination)
            kept = sorted(candidates, key=lambda hyp: -hyp[1])[:beam_size]
            walk(kept, step + 1, prob * q)

    walk([((), 0.0, False)], 0, 1.0)
    return dict(result)


def total_variation(sentences, distribution):
    counts = defaultdict(int)
    for sentence in sentences:
        counts[sentence.ids] += 1
    support = set(counts) | set(distribution)
    n = len(sentences)
    return 0.5 * sum(abs(counts[ids] / n - distribution.get(ids, 0.0)) for ids in support)


def _count(tokens, gram):
    m = len(gram)
    return sum(1 for i in range(len(tokens) - m + 1) if tuple(tokens[i : i + m]) == gram)


def brute_force_bleu(hyp, refs, n, epsilon=1e-9):
    hyp = list(hyp)
    log_sum = 0.0
    for m in range(1, n + 1):
        grams = [tuple(hyp[i : i + m]) for i in range(len(hyp) - m + 1)]
        matched = 0
        for gram in set(grams):
            best = max(_count(ref, gram) for ref in refs)
            matched += min(grams.count(gram), best)
        precision = matched / len(grams) if grams else 0.0
        log_sum += math.log(precision if precision > 0 else epsilon)
    c = len(hyp)
    r = min((len(ref) for ref in refs), key=lambda length: (abs(length - c), length))
    penalty = 1.0 if c > r else math.exp(1 - r / c)
    return math.exp(log_sum / n) * penalty


def brute_force_corpus_bleu(hyps, refs, n, epsilon=1e-9):
    return math.fsum(brute_force_bleu(hyp, refs, n, epsilon) for hyp in hyps) / len(hyps)


def brute_force_self_bleu(token_lists, n, epsilon=1e-9):
    scores = [
        brute_force_bleu(tokens, token_lists[:i] + token_lists[i + 1 :], n, epsilon)
        for i, tokens in enumerate(token_lists)
    ]
    return math.fsum(scores) / len(scores)


def random_rows(count, vocab_size, max_length, seed):
    rng = np.random.default_rng(seed)
    return [
        tuple(int(t) for t in rng.integers(4, vocab_size, size=int(rng.integers(1, max_length + 1))))
        for _ in range(count)
    ]
