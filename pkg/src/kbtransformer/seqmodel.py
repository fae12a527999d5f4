"""Tiny decision transformer, action tokenizer and pair preprocessing.

The network is split as ``T = T2 o T1``: ``T1`` maps (state, token prefix) to
one representation row per prefix token and ``T2`` is the final bias-augmented
linear layer ``W_O`` followed by a softmax. Only ``T2`` is replaced during
Bayesian fine-tuning; ``T1`` stays frozen.

Sequence layout: position 0 holds the embedded state, positions 1..i the
embedded prefix tokens (token 0 is SOS). A causal mask makes row j of the
representation depend only on the state and tokens 1..j.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint

logger = logging.getLogger(__name__)

SOS = 0


class DivergenceError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Tokenizer:
    """Uniform action bins over ``[-u_max, u_max]``; token 0 is SOS."""

    n_bins: int = 16
    u_max: float = 10.0

    @property
    def d_world(self) -> int:
        return self.n_bins + 1

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.u_max, self.u_max, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def bin_width(self) -> float:
        return 2.0 * self.u_max / self.n_bins

    def tokenize(self, a):
        """Action(s) -> token id(s); out-of-range actions are clamped."""
        a = np.asarray(a, dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("actions must be finite")
        a = np.clip(a, -self.u_max, self.u_max)
        idx = np.floor((a + self.u_max) / self.bin_width).astype(int)
        idx = np.clip(idx, 0, self.n_bins - 1) + 1
        return idx if idx.ndim else int(idx)

    def detokenize(self, token):
        token = np.asarray(token)
        if np.any(token < 1) or np.any(token > self.n_bins):
            raise ValueError("token is not an action token")
        out = self.centers[token - 1]
        return out if np.ndim(out) else float(out)

    def one_hot(self, token) -> np.ndarray:
        token = np.asarray(token, dtype=int)
        out = np.zeros(token.shape + (self.d_world,))
        np.put_along_axis(out, token[..., None], 1.0, axis=-1)
        return out


def one_hot(token, d_world: int) -> np.ndarray:
    token = np.asarray(token, dtype=int)
    out = np.zeros(token.shape + (d_world,))
    np.put_along_axis(out, token[..., None], 1.0, axis=-1)
    return out


# --------------------------------------------------------------------------
# transformer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d_state: int = 4
    d: int = 16
    n_heads: int = 2
    d_ff: int = 8
    n_layers: int = 2
    d_world: int = 17
    max_len: int = 8
    state_scale: tuple = (1.0, 1.0, 0.2, 1.0)

    @property
    def d_o(self) -> int:
        return self.d_world


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_back(dy, cache, g):
    xh, inv = cache
    dxh = dy * g
    n = xh.shape[-1]
    dx = inv / n * (n * dxh - dxh.sum(-1, keepdims=True) - xh * (dxh * xh).sum(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xh).sum(red), dy.sum(red)


def log_softmax(x):
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def softmax(x):
    return np.exp(log_softmax(x))


class TransformerModel:
    """Pre-norm causal transformer over [state, token prefix] with a linear+softmax output.

    Parameters live in ``self.params`` (name -> float64 array); the output
    layer is ``params["head.W_O"]`` of shape (d+1, d_o), bias row last.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), rng=None, params=None):
        self.config = config
        if params is not None:
            self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
            return
        rng = np.random.default_rng(0) if rng is None else rng
        c = config
        d = c.d

        def lin(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        p = {
            "state.W": lin(c.d_state, d),
            "state.b": np.zeros(d),
            "tok.E": rng.normal(0.0, 0.5, size=(c.d_world, d)),
            "pos.E": rng.normal(0.0, 0.1, size=(c.max_len, d)),
        }
        for k in range(c.n_layers):
            pre = f"l{k}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for nm in ("q", "k", "v", "o"):
                p[pre + f"attn.W{nm}"] = lin(d, d)
                p[pre + f"attn.b{nm}"] = np.zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            p[pre + "ff.W1"], p[pre + "ff.b1"] = lin(d, c.d_ff), np.zeros(c.d_ff)
            p[pre + "ff.W2"], p[pre + "ff.b2"] = lin(c.d_ff, d), np.zeros(d)
        p["lnf.g"], p["lnf.b"] = np.ones(d), np.zeros(d)
        p["head.W_O"] = np.vstack([lin(d, c.d_o), np.zeros((1, c.d_o))])
        self.params = p

    # -- forward ------------------------------------------------------------

    @property
    def W_O(self) -> np.ndarray:
        return self.params["head.W_O"]

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, params=self.params)

    def _embed(self, X, tokens):
        c, p = self.config, self.params
        X = np.asarray(X, dtype=float).reshape(-1, c.d_state) / np.asarray(c.state_scale)
        tokens = np.asarray(tokens, dtype=int).reshape(X.shape[0], -1)
        n_tok = tokens.shape[1]
        if n_tok < 1:
            raise ValueError("token prefix must hold at least one token")
        if n_tok + 1 > c.max_len:
            raise ValueError(f"prefix length {n_tok} exceeds max_len - 1")
        if np.any(tokens < 0) or np.any(tokens >= c.d_world):
            raise ValueError("token id out of range")
        s = X @ p["state.W"] + p["state.b"]
        h = np.concatenate([s[:, None, :], p["tok.E"][tokens]], axis=1)
        return h + p["pos.E"][: n_tok + 1], (X, tokens)

    def _attn(self, x, pre):
        p, c = self.params, self.config
        B, T, d = x.shape
        H, dh = c.n_heads, d // c.n_heads

        def proj(nm):
            return (x @ p[pre + f"W{nm}"] + p[pre + f"b{nm}"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        mask = np.triu(np.ones((T, T), dtype=bool), 1)
        scores = np.where(mask, -1e30, scores)
        A = softmax(scores)
        o = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        out = o @ p[pre + "Wo"] + p[pre + "bo"]
        return out, (x, q, k, v, A, o)

    def _attn_back(self, dout, cache, pre, g):
        p, c = self.params, self.config
        x, q, k, v, A, o = cache
        B, T, d = x.shape
        H, dh = c.n_heads, d // c.n_heads
        g[pre + "Wo"] = o.reshape(-1, d).T @ dout.reshape(-1, d)
        g[pre + "bo"] = dout.reshape(-1, d).sum(0)
        do = (dout @ p[pre + "Wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dA = do @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        ds = A * (dA - (dA * A).sum(-1, keepdims=True)) / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dx = np.zeros_like(x)
        for nm, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = dt.transpose(0, 2, 1, 3).reshape(B, T, d)
            g[pre + f"W{nm}"] = x.reshape(-1, d).T @ dt.reshape(-1, d)
            g[pre + f"b{nm}"] = dt.reshape(-1, d).sum(0)
            dx += dt @ p[pre + f"W{nm}"].T
        return dx

    def _body(self, X, tokens, keep=False):
        p, c = self.params, self.config
        h, emb_cache = self._embed(X, tokens)
        caches = []
        for k in range(c.n_layers):
            pre = f"l{k}."
            a_in, ln1 = _ln(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            a_out, attn = self._attn(a_in, pre + "attn.")
            h = h + a_out
            f_in, ln2 = _ln(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f_pre = f_in @ p[pre + "ff.W1"] + p[pre + "ff.b1"]
            f_act = np.maximum(f_pre, 0.0)
            h = h + f_act @ p[pre + "ff.W2"] + p[pre + "ff.b2"]
            if keep:
                caches.append((ln1, attn, ln2, f_in, f_pre, f_act))
        out, lnf = _ln(h, p["lnf.g"], p["lnf.b"])
        rep = out[:, 1:, :]
        return rep, (emb_cache, caches, lnf) if keep else None

    def t1_forward(self, X, tokens) -> np.ndarray:
        """Representation rows for one state and one token prefix: shape (i, d)."""
        X = np.asarray(X, dtype=float)
        tokens = np.asarray(tokens, dtype=int)
        if X.size == 0 or tokens.size == 0:
            raise ValueError("state and prefix must be non-empty")
        rep, _ = self._body(X.reshape(1, -1), tokens.reshape(1, -1))
        return rep[0]

    def t1_batch(self, X, tokens) -> np.ndarray:
        """Batched T1: X (B, d_state), tokens (B, i) -> (B, i, d)."""
        rep, _ = self._body(X, tokens)
        return rep

    def logits(self, X, tokens) -> np.ndarray:
        rep, _ = self._body(X, tokens)
        return rep @ self.W_O[:-1] + self.W_O[-1]

    def probs(self, X, tokens) -> np.ndarray:
        return softmax(self.logits(X, tokens))

    # -- training -----------------------------------------------------------

    def loss_and_grads(self, X, tokens, targets):
        """Mean cross-entropy of next-token predictions and its gradient.

        ``targets`` has the shape of ``tokens``: targets[b, j] is the token that
        should follow prefix tokens[b, :j+1].
        """
        p, c = self.params, self.config
        rep, (emb_cache, caches, lnf) = self._body(X, tokens, keep=True)
        targets = np.asarray(targets, dtype=int).reshape(rep.shape[:2])
        W = self.W_O
        logit = rep @ W[:-1] + W[-1]
        lp = log_softmax(logit)
        n = targets.size
        loss = -np.take_along_axis(lp, targets[..., None], -1).sum() / n
        dlogit = np.exp(lp)
        np.put_along_axis(dlogit, targets[..., None], np.take_along_axis(dlogit, targets[..., None], -1) - 1.0, -1)
        dlogit /= n

        g = {}
        d = c.d
        flat_rep = rep.reshape(-1, d)
        flat_dl = dlogit.reshape(-1, c.d_o)
        g["head.W_O"] = np.vstack([flat_rep.T @ flat_dl, flat_dl.sum(0, keepdims=True)])
        drep = dlogit @ W[:-1].T
        dout = np.zeros((rep.shape[0], rep.shape[1] + 1, d))
        dout[:, 1:] = drep
        dh, g["lnf.g"], g["lnf.b"] = _ln_back(dout, lnf, p["lnf.g"])
        for k in reversed(range(c.n_layers)):
            pre = f"l{k}."
            ln1, attn, ln2, f_in, f_pre, f_act = caches[k]
            g[pre + "ff.W2"] = f_act.reshape(-1, c.d_ff).T @ dh.reshape(-1, d)
            g[pre + "ff.b2"] = dh.reshape(-1, d).sum(0)
            df = (dh @ p[pre + "ff.W2"].T) * (f_pre > 0)
            g[pre + "ff.W1"] = f_in.reshape(-1, d).T @ df.reshape(-1, c.d_ff)
            g[pre + "ff.b1"] = df.reshape(-1, c.d_ff).sum(0)
            dfin = df @ p[pre + "ff.W1"].T
            dx, g[pre + "ln2.g"], g[pre + "ln2.b"] = _ln_back(dfin, ln2, p[pre + "ln2.g"])
            dh = dh + dx
            da = self._attn_back(dh, attn, pre + "attn.", g)
            dx, g[pre + "ln1.g"], g[pre + "ln1.b"] = _ln_back(da, ln1, p[pre + "ln1.g"])
            dh = dh + dx
        Xs, toks = emb_cache
        g["pos.E"] = np.zeros_like(p["pos.E"])
        g["pos.E"][: dh.shape[1]] = dh.sum(0)
        g["state.W"] = Xs.T @ dh[:, 0]
        g["state.b"] = dh[:, 0].sum(0)
        gE = np.zeros_like(p["tok.E"])
        np.add.at(gE, toks.reshape(-1), dh[:, 1:].reshape(-1, d))
        g["tok.E"] = gE
        return float(loss), g

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        c = self.config
        meta = {f.name: ",".join(map(repr, getattr(c, f.name))) if isinstance(getattr(c, f.name), tuple)
                else getattr(c, f.name) for f in fields(c)}
        checkpoint.save(path, "transformer", self.params, meta)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        tensors, meta = checkpoint.load(path, kind="transformer",
                                        required=lambda meta: _param_names(_config_from_meta(meta)))
        config = _config_from_meta(meta)
        return cls(config, params={n: tensors[n] for n in _param_names(config)})


def _config_from_meta(meta: dict) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            raise checkpoint.CheckpointError(f"missing config key {f.name!r}")
        raw = meta[f.name]
        try:
            kw[f.name] = tuple(float(v) for v in raw.split(",")) if f.name == "state_scale" else int(raw)
        except ValueError:
            raise checkpoint.CheckpointError(f"bad value for config key {f.name!r}: {raw!r}") from None
    return ModelConfig(**kw)


def _param_names(config: ModelConfig) -> list:
    return list(TransformerModel(config, rng=np.random.default_rng(0)).params)


def save_checkpoint(model: TransformerModel, path) -> None:
    model.save(path)


def load_checkpoint(path) -> TransformerModel:
    return TransformerModel.load(path)


# --------------------------------------------------------------------------
# preprocessing and pretraining
# --------------------------------------------------------------------------


@dataclass
class PreprocessedBatch:
    H_hat: np.ndarray
    Y_hat: np.ndarray

    def __post_init__(self):
        if self.H_hat.shape[0] != self.Y_hat.shape[0]:
            raise ValueError("H_hat and Y_hat row counts differ")

    def __len__(self):
        return self.H_hat.shape[0]


def preprocess_pair(model: TransformerModel, X, Y) -> PreprocessedBatch:
    """Expand one (state, token sequence) pair into every causal prefix step.

    ``Y`` starts with SOS. For prefix length i = 1..y-1 the i representation
    rows of ``T1(X, Y[:i])`` are stacked with the one-hot tokens ``Y[1:i+1]``,
    giving y(y-1)/2 rows.
    """
    Y = np.asarray(Y, dtype=int).reshape(-1)
    if Y.size < 2:
        raise ValueError("output sequence needs at least SOS and one token")
    hs, ys = [], []
    for i in range(1, Y.size):
        hs.append(model.t1_forward(X, Y[:i]))
        ys.append(one_hot(Y[1:i + 1], model.config.d_world))
    return PreprocessedBatch(np.vstack(hs), np.vstack(ys))


def pretrain(model: TransformerModel, states, tokens, epochs: int = 200, step_size: float = 1e-2,
             batch_size: int | None = 32, optimizer: str = "sgd", rng=None, log_every: int = 0):
    """Fit the whole transformer to (state -> action token) pairs by cross-entropy.

    Returns ``(model, losses)`` with one mean training loss per epoch; the model
    is updated in place. ``optimizer`` is ``"sgd"`` (fixed step) or ``"adam"``;
    ``batch_size=None`` gives full-batch gradient descent.
    """
    states = np.asarray(states, dtype=float)
    tokens = np.asarray(tokens, dtype=int).reshape(-1)
    if len(states) == 0:
        raise ValueError("dataset is empty")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(states)
    bs = n if batch_size is None else min(batch_size, n)
    prefix = np.full((n, 1), SOS)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    s = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, t = 0.9, 0.999, 0
    losses = []
    for ep in range(epochs):
        order = rng.permutation(n)
        tot = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            loss, g = model.loss_and_grads(states[idx], prefix[idx], tokens[idx, None])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {ep}, batch starting {lo}")
            tot += loss * len(idx)
            t += 1
            for k, gk in g.items():
                if optimizer == "sgd":
                    model.params[k] -= step_size * gk
                else:
                    m[k] = b1 * m[k] + (1 - b1) * gk
                    s[k] = b2 * s[k] + (1 - b2) * gk * gk
                    mh = m[k] / (1 - b1**t)
                    sh = s[k] / (1 - b2**t)
                    model.params[k] -= step_size * mh / (np.sqrt(sh) + 1e-8)
        losses.append(tot / n)
        if log_every and (ep + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f", ep + 1, losses[-1])
    return model, np.array(losses)


def token_accuracy(model: TransformerModel, states, tokens) -> float:
    states = np.asarray(states, dtype=float)
    pred = model.logits(states, np.full((len(states), 1), SOS))[:, 0].argmax(-1)
    return float(np.mean(pred == np.asarray(tokens).reshape(-1)))


# --------------------------------------------------------------------------
# dataset CSV
# --------------------------------------------------------------------------

DATASET_COLUMNS = ["state0", "state1", "state2", "state3", "action", "action_token"]


def write_dataset_csv(path, states, actions, tokens) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for s, a, t in zip(np.asarray(states), np.asarray(actions), np.asarray(tokens)):
            w.writerow(["%.17g" % v for v in s] + ["%.17g" % a, int(t)])


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != DATASET_COLUMNS:
            raise ValueError(f"unexpected dataset header {header}")
        rows = list(r)
    arr = np.array([[float(v) for v in row] for row in rows]).reshape(-1, len(DATASET_COLUMNS))
    return arr[:, :4], arr[:, 4], arr[:, 5].astype(int)
