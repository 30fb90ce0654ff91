"""
Recurrent language model (the generator), the fixed random oracle and the
recurrent discriminator. Everything is float64 numpy with hand-written
backpropagation through time.

Generator conditionals are softmax(o_t . W^T / alpha) where W is the embedding
matrix (weight tying). o_t is the top hidden state, projected to embed_dim
when embed_dim != hidden_dim.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tempsweep.base.exceptions import ConfigError, ModelError, NumericalOverflow, ParamsFormatError
from tempsweep.base.utils import STREAM_INIT, chunks, stream
from tempsweep.corpus import NUM_RESERVED, Sentence, pad_batch

logger = logging.getLogger(__name__)

ORACLE_HIDDEN_DIM = 32
FORMAT_MAGIC = b"TEMPSWEEP-PARAMS"
FORMAT_VERSION = 1
NLL_CHUNK = 256


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 32
    num_layers: int = 1

    def __post_init__(self):
        if self.vocab_size < NUM_RESERVED + 1:
            raise ConfigError(f"vocab_size must be at least {NUM_RESERVED + 1}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be positive")
        if self.num_layers not in (1, 2):
            raise ConfigError("num_layers must be 1 or 2")

    def layer_input_dim(self, layer):
        return self.embed_dim if layer == 0 else self.hidden_dim


class BaseParams:
    """
    Named float64 weight blocks plus the metadata stored in the model file.
    Blocks are never mutated outside training code, which works on copies.
    """

    kind = None

    def __init__(self, dims, weights, seed=None, lineage=(), is_oracle=False):
        self.dims = dims
        self.weights = {name: np.asarray(value, dtype=np.float64) for name, value in weights.items()}
        self.seed = seed
        self.lineage = tuple(lineage)
        self.is_oracle = is_oracle
        self._check_shapes()

    def __str__(self):  # pragma: no cover
        return f"<{self.__class__.__name__} {self.dims}>"

    def __repr__(self):  # pragma: no cover
        return self.__str__()

    def __getitem__(self, name):
        return self.weights[name]

    @classmethod
    def shapes_for(cls, dims):  # pragma: no cover
        raise NotImplementedError()

    def expected_shapes(self):
        return self.shapes_for(self.dims)

    def _check_shapes(self):
        expected = self.expected_shapes()
        if set(expected) != set(self.weights):
            raise ModelError(
                f"weight blocks {sorted(self.weights)} do not match {sorted(expected)}"
            )
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ModelError(
                    f"block {name} has shape {self.weights[name].shape}, expected {shape}"
                )

    @property
    def block_names(self):
        return sorted(self.weights)

    def copy(self, lineage_entry=None):
        lineage = self.lineage + ((lineage_entry,) if lineage_entry else ())
        return self.__class__(
            self.dims,
            {name: value.copy() for name, value in self.weights.items()},
            seed=self.seed,
            lineage=lineage,
            is_oracle=self.is_oracle,
        )

    def is_finite(self):
        return all(np.isfinite(value).all() for value in self.weights.values())

    def equals(self, other):
        """Bit-exact comparison of every block"""
        return (
            type(self) is type(other)
            and self.dims == other.dims
            and self.block_names == other.block_names
            and all(np.array_equal(self[name], other[name]) for name in self.block_names)
        )

    def to_bytes(self):
        payload = b"".join(
            np.ascontiguousarray(self[name], dtype="<f8").tobytes() for name in self.block_names
        )
        header = {
            "kind": self.kind,
            "dims": asdict(self.dims),
            "seed": self.seed,
            "lineage": list(self.lineage),
            "is_oracle": self.is_oracle,
            "blocks": [[name, list(self[name].shape)] for name in self.block_names],
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        header_line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        magic_line = FORMAT_MAGIC + b" " + str(FORMAT_VERSION).encode()
        return magic_line + b"\n" + header_line + b"\n" + payload

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:12]


class LstmLmParams(BaseParams):
    """
    Generator weights:
      W            vocab_size x embed_dim, embedding and tied output projection
      layers.k.U   4*hidden x (input + hidden), gates in order i, f, g, o
      layers.k.b   4*hidden
      proj         embed_dim x hidden_dim, only when the two differ
    """

    kind = "generator"

    @classmethod
    def shapes_for(cls, d):
        shapes = {"W": (d.vocab_size, d.embed_dim)}
        for layer in range(d.num_layers):
            fan_in = d.layer_input_dim(layer) + d.hidden_dim
            shapes[f"layers.{layer}.U"] = (4 * d.hidden_dim, fan_in)
            shapes[f"layers.{layer}.b"] = (4 * d.hidden_dim,)
        if d.embed_dim != d.hidden_dim:
            shapes["proj"] = (d.embed_dim, d.hidden_dim)
        return shapes


class DiscriminatorParams(BaseParams):
    """
    Discriminator weights: embedding E, recurrent encoder layers and a
    scalar head applied to the final hidden state.
    """

    kind = "discriminator"

    @classmethod
    def shapes_for(cls, d):
        shapes = {"E": (d.vocab_size, d.embed_dim), "head.w": (d.hidden_dim,), "head.b": (1,)}
        for layer in range(d.num_layers):
            fan_in = d.layer_input_dim(layer) + d.hidden_dim
            shapes[f"layers.{layer}.U"] = (4 * d.hidden_dim, fan_in)
            shapes[f"layers.{layer}.b"] = (4 * d.hidden_dim,)
        return shapes


@dataclass
class RnnState:
    """h and c have shape (num_layers, batch, hidden_dim)"""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, dims, batch=1):
        shape = (dims.num_layers, batch, dims.hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))

    def select(self, rows):
        return RnnState(self.h[:, rows], self.c[:, rows])

    def repeat(self, times):
        return RnnState(np.repeat(self.h, times, axis=1), np.repeat(self.c, times, axis=1))

    @property
    def top(self):
        return self.h[-1]


def _random_weights(params_class, dims, seed, scale):
    if not scale > 0:
        raise ConfigError("scale must be positive")
    rng = stream(seed, STREAM_INIT)
    shapes = params_class.shapes_for(dims)
    return {name: rng.normal(0.0, scale, size=shapes[name]) for name in sorted(shapes)}


def init_params(dims, seed, scale=0.1):
    weights = _random_weights(LstmLmParams, dims, seed, scale)
    return LstmLmParams(dims, weights, seed=seed, lineage=[f"init seed={seed} scale={scale}"])


def zero_params(dims):
    return LstmLmParams(dims, {n: np.zeros(s) for n, s in LstmLmParams.shapes_for(dims).items()})


def make_oracle(vocab_size, seed):
    dims = ModelDims(vocab_size, ORACLE_HIDDEN_DIM, ORACLE_HIDDEN_DIM, 1)
    weights = _random_weights(LstmLmParams, dims, seed, 1.0)
    return LstmLmParams(
        dims, weights, seed=seed, lineage=[f"oracle seed={seed} scale=1.0"], is_oracle=True
    )


def init_discriminator(dims, seed, scale=0.1):
    weights = _random_weights(DiscriminatorParams, dims, seed, scale)
    return DiscriminatorParams(
        dims, weights, seed=seed, lineage=[f"init seed={seed} scale={scale}"]
    )


def zero_discriminator(dims):
    shapes = DiscriminatorParams.shapes_for(dims)
    return DiscriminatorParams(dims, {n: np.zeros(s) for n, s in shapes.items()})


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_cell(U, b, x, h, c):
    hidden = h.shape[-1]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ U.T + b
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden : 2 * hidden])
    g = np.tanh(z[:, 2 * hidden : 3 * hidden])
    o = sigmoid(z[:, 3 * hidden :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (xh, i, f, g, o, c, tc)


def _lstm_cell_backward(U, dh, dc, cache):
    xh, i, f, g, o, c_prev, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc**2)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g**2),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    return dz @ U, dc * f, dz.T @ xh, dz.sum(axis=0)


def _check_tokens(dims, tokens):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= dims.vocab_size):
        raise ModelError(f"token id out of range for vocab_size={dims.vocab_size}")


def _output_logits(params, top):
    o = top @ params["proj"].T if "proj" in params.weights else top
    return o @ params["W"].T, o


def forward_step(params, state, token_ids, step=None):
    """
    One LSTM step for a batch (or a single int token). Returns the new state
    and the pre-softmax logits o_t . W^T.
    """
    single = np.ndim(token_ids) == 0
    tokens = np.atleast_1d(np.asarray(token_ids, dtype=np.int64))
    _check_tokens(params.dims, tokens)
    if state.h.shape[1] != tokens.shape[0]:
        raise ModelError("state batch size does not match the number of tokens")

    x = params["W"][tokens]
    h_layers, c_layers = [], []
    for layer in range(params.dims.num_layers):
        h, c, _ = _lstm_cell(
            params[f"layers.{layer}.U"],
            params[f"layers.{layer}.b"],
            x,
            state.h[layer],
            state.c[layer],
        )
        h_layers.append(h)
        c_layers.append(c)
        x = h
    logits, _ = _output_logits(params, x)
    if not (np.isfinite(logits).all() and np.isfinite(c_layers[-1]).all()):
        raise NumericalOverflow(step)
    new_state = RnnState(np.stack(h_layers), np.stack(c_layers))
    return new_state, (logits[0] if single else logits)


def log_conditional(logits, alpha):
    """Log of conditional_dist for alpha > 0, via log-sum-exp"""
    if not alpha > 0:
        raise ConfigError("log_conditional needs alpha > 0")
    z = np.asarray(logits, dtype=np.float64) / alpha
    top = np.max(z, axis=-1, keepdims=True)
    shifted = z - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def conditional_dist(logits, alpha):
    """
    softmax(logits / alpha) over the last axis; alpha == 0 is the argmax
    limit with ties going to the lowest token id.
    """
    if alpha < 0:
        raise ConfigError(f"temperature must be non-negative, got {alpha}")
    logits = np.asarray(logits, dtype=np.float64)
    if alpha == 0:
        probs = np.zeros_like(logits)
        np.put_along_axis(probs, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
        return probs
    z = logits / alpha
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy(probs):
    """Shannon entropy in nats over the last axis, 0 log 0 = 0"""
    probs = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return -np.sum(probs * logs, axis=-1)


def _forward_sequence(params, inputs):
    batch, steps = inputs.shape
    dims = params.dims
    embedded = params["W"][inputs]
    h = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    c = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    tops = np.empty((batch, steps, dims.hidden_dim))
    caches = []
    for t in range(steps):
        x = embedded[:, t]
        step_caches = []
        for layer in range(dims.num_layers):
            h[layer], c[layer], cache = _lstm_cell(
                params[f"layers.{layer}.U"], params[f"layers.{layer}.b"], x, h[layer], c[layer]
            )
            step_caches.append(cache)
            x = h[layer]
        tops[:, t] = x
        caches.append(step_caches)
    logits, o = _output_logits(params, tops)
    return logits, o, tops, caches


def sequence_logits(params, sentences):
    """Teacher-forced logits (batch, steps, vocab) plus targets and mask"""
    inputs, targets, mask = pad_batch(sentences)
    _check_tokens(params.dims, targets)
    logits, _, _, _ = _forward_sequence(params, inputs)
    return logits, targets, mask


def batch_nll(params, sentences, alpha=1.0):
    """Per-sentence NLL in nats per token (EOS prediction included)"""
    if not alpha > 0:
        raise ConfigError("sequence NLL needs alpha > 0")
    sentences = list(sentences)
    out = np.empty(len(sentences))
    start = 0
    for chunk in chunks(sentences, NLL_CHUNK):
        logits, targets, mask = sequence_logits(params, chunk)
        logp = log_conditional(logits, alpha)
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        out[start : start + len(chunk)] = -(picked * mask).sum(axis=1) / mask.sum(axis=1)
        start += len(chunk)
    return out


def sequence_nll(params, sentence, alpha=1.0):
    return float(batch_nll(params, [sentence], alpha)[0])


def loss_and_gradients(params, sentences, token_weights=None, alpha=1.0, entropy_weights=None):
    """
    Teacher-forced objective and its exact gradient for every block.

      loss = sum_t w_t * (-log p_alpha(x_t | x_<t)) - sum_t e_t * H(p_alpha(. | x_<t))

    `token_weights` defaults to the mean per-token NLL (mask / token count).
    REINFORCE passes advantages scaled by 1/N as weights.
    """
    inputs, targets, mask = pad_batch(sentences)
    _check_tokens(params.dims, targets)
    weights = mask / mask.sum() if token_weights is None else np.asarray(token_weights) * mask
    dims = params.dims

    logits, o, tops, caches = _forward_sequence(params, inputs)
    logp = log_conditional(logits, alpha)
    probs = np.exp(logp)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(weights * picked))

    dscaled = probs * weights[..., None]
    np.put_along_axis(
        dscaled,
        targets[..., None],
        np.take_along_axis(dscaled, targets[..., None], axis=-1) - weights[..., None],
        axis=-1,
    )
    if entropy_weights is not None:
        ew = np.asarray(entropy_weights) * mask
        ent = -np.sum(probs * logp, axis=-1)
        loss -= float(np.sum(ew * ent))
        dscaled += ew[..., None] * probs * (logp + ent[..., None])
    if not np.isfinite(loss):
        raise NumericalOverflow(where="loss")
    dlogits = dscaled / alpha

    flat_dlogits = dlogits.reshape(-1, dims.vocab_size)
    grads = {"W": flat_dlogits.T @ o.reshape(-1, dims.embed_dim)}
    do = dlogits @ params["W"]
    if "proj" in params.weights:
        grads["proj"] = do.reshape(-1, dims.embed_dim).T @ tops.reshape(-1, dims.hidden_dim)
        dtop = do @ params["proj"]
    else:
        dtop = do
    for layer in range(dims.num_layers):
        grads[f"layers.{layer}.U"] = np.zeros_like(params[f"layers.{layer}.U"])
        grads[f"layers.{layer}.b"] = np.zeros_like(params[f"layers.{layer}.b"])

    batch, steps = inputs.shape
    dh = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    dc = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    for t in reversed(range(steps)):
        dh[-1] = dh[-1] + dtop[:, t]
        for layer in reversed(range(dims.num_layers)):
            dxh, dc[layer], dU, db = _lstm_cell_backward(
                params[f"layers.{layer}.U"], dh[layer], dc[layer], caches[t][layer]
            )
            grads[f"layers.{layer}.U"] += dU
            grads[f"layers.{layer}.b"] += db
            fan_in = dims.layer_input_dim(layer)
            dh[layer] = dxh[:, fan_in:]
            if layer > 0:
                dh[layer - 1] = dh[layer - 1] + dxh[:, :fan_in]
            else:
                np.add.at(grads["W"], inputs[:, t], dxh[:, :fan_in])
    return loss, grads


def _encode_final(disc, sentences):
    """Runs the discriminator encoder; returns final hidden states and caches"""
    rows = [s.ids if isinstance(s, Sentence) else tuple(s) for s in sentences]
    lengths = np.array([len(row) for row in rows])
    width = lengths.max()
    tokens = np.zeros((len(rows), width), dtype=np.int64)
    for index, row in enumerate(rows):
        tokens[index, : len(row)] = row
    _check_tokens(disc.dims, tokens)

    dims = disc.dims
    batch = len(rows)
    embedded = disc["E"][tokens]
    h = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    c = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    final = np.zeros((batch, dims.hidden_dim))
    caches = []
    for t in range(width):
        x = embedded[:, t]
        step_caches = []
        for layer in range(dims.num_layers):
            h[layer], c[layer], cache = _lstm_cell(
                disc[f"layers.{layer}.U"], disc[f"layers.{layer}.b"], x, h[layer], c[layer]
            )
            step_caches.append(cache)
            x = h[layer]
        ends = lengths - 1 == t
        final[ends] = x[ends]
        caches.append(step_caches)
    return final, tokens, lengths, caches


def batch_discriminate(disc, sentences):
    outputs = []
    for chunk in chunks(list(sentences), NLL_CHUNK):
        final, _, _, _ = _encode_final(disc, chunk)
        outputs.append(sigmoid(final @ disc["head.w"] + disc["head.b"][0]))
    return np.concatenate(outputs)


def discriminate(disc, sentence):
    """Probability in (0, 1) that `sentence` is real"""
    return float(batch_discriminate(disc, [sentence])[0])


def disc_loss_and_gradients(disc, sentences, labels):
    """Mean binary cross-entropy (labels 1 = real) and exact gradients"""
    labels = np.asarray(labels, dtype=np.float64)
    dims = disc.dims
    final, tokens, lengths, caches = _encode_final(disc, sentences)
    scores = final @ disc["head.w"] + disc["head.b"][0]
    batch = len(labels)
    # softplus form of -[y log s(x) + (1 - y) log(1 - s(x))]
    loss = float(np.mean(np.logaddexp(0.0, scores) - labels * scores))
    dscore = (sigmoid(scores) - labels) / batch

    grads = {
        "head.w": final.T @ dscore,
        "head.b": np.array([dscore.sum()]),
        "E": np.zeros_like(disc["E"]),
    }
    for layer in range(dims.num_layers):
        grads[f"layers.{layer}.U"] = np.zeros_like(disc[f"layers.{layer}.U"])
        grads[f"layers.{layer}.b"] = np.zeros_like(disc[f"layers.{layer}.b"])

    dfinal = dscore[:, None] * disc["head.w"][None, :]
    dh = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    dc = [np.zeros((batch, dims.hidden_dim)) for _ in range(dims.num_layers)]
    for t in reversed(range(tokens.shape[1])):
        ends = (lengths - 1 == t)[:, None]
        dh[-1] = dh[-1] + np.where(ends, dfinal, 0.0)
        for layer in reversed(range(dims.num_layers)):
            dxh, dc[layer], dU, db = _lstm_cell_backward(
                disc[f"layers.{layer}.U"], dh[layer], dc[layer], caches[t][layer]
            )
            grads[f"layers.{layer}.U"] += dU
            grads[f"layers.{layer}.b"] += db
            fan_in = dims.layer_input_dim(layer)
            dh[layer] = dxh[:, fan_in:]
            if layer > 0:
                dh[layer - 1] = dh[layer - 1] + dxh[:, :fan_in]
            else:
                np.add.at(grads["E"], tokens[:, t], dxh[:, :fan_in])
    return loss, grads


PARAMS_CLASSES = {cls.kind: cls for cls in (LstmLmParams, DiscriminatorParams)}


def save_params(params, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params.to_bytes())
    return path


def params_from_bytes(data):
    magic_line, sep, rest = data.partition(b"\n")
    if not sep or not magic_line.startswith(FORMAT_MAGIC):
        raise ParamsFormatError("not a tempsweep parameter file")
    try:
        version = int(magic_line[len(FORMAT_MAGIC) :].strip())
    except ValueError as exc:
        raise ParamsFormatError("unreadable format version") from exc
    if version != FORMAT_VERSION:
        raise ParamsFormatError(f"format version {version} is not supported (expected {FORMAT_VERSION})")

    header_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ParamsFormatError("truncated file: header is incomplete")
    try:
        header = json.loads(header_line)
        params_class = PARAMS_CLASSES[header["kind"]]
        dims = ModelDims(**header["dims"])
        blocks = [(name, tuple(shape)) for name, shape in header["blocks"]]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise ParamsFormatError(f"malformed header: {exc}") from exc

    expected = sum(int(np.prod(shape)) for _, shape in blocks) * 8
    if len(payload) != expected:
        raise ParamsFormatError(
            f"truncated or padded file: payload has {len(payload)} bytes, expected {expected}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ParamsFormatError("checksum mismatch")

    weights, offset = {}, 0
    for name, shape in blocks:
        size = int(np.prod(shape)) * 8
        weights[name] = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape)
        weights[name] = weights[name].astype(np.float64)
        offset += size
    try:
        return params_class(
            dims,
            weights,
            seed=header.get("seed"),
            lineage=header.get("lineage", ()),
            is_oracle=header.get("is_oracle", False),
        )
    except ModelError as exc:
        raise ParamsFormatError(f"shape mismatch: {exc}") from exc


def load_params(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParamsFormatError(f"can not read {path}: {exc}") from exc
    return params_from_bytes(data)
