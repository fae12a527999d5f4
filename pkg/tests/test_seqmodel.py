import numpy as np
import pytest

from kbtransformer.checkpoint import CheckpointError
from kbtransformer.seqmodel import (
    SOS,
    DivergenceError,
    ModelConfig,
    Tokenizer,
    TransformerModel,
    load_checkpoint,
    one_hot,
    preprocess_pair,
    pretrain,
    read_dataset_csv,
    save_checkpoint,
    softmax,
    token_accuracy,
    write_dataset_csv,
)

TK = Tokenizer()


# ---------------------------------------------------------------- tokenizer


def test_tokenizer_layout():
    assert TK.d_world == 17 and TK.bin_width == 1.25
    assert TK.tokenize(0.0) in (8, 9)
    assert TK.tokenize(10.0) == 16 and TK.tokenize(-10.0) == 1
    assert TK.tokenize(1e6) == 16 and TK.tokenize(-1e6) == 1
    assert TK.one_hot(TK.tokenize(0.0)).sum() == 1.0


def test_tokenizer_round_trip_and_monotone():
    a = np.random.default_rng(0).uniform(-10, 10, size=1000)
    assert np.all(np.abs(TK.detokenize(TK.tokenize(a)) - a) <= 10 * 2 / 16)
    s = np.sort(a)
    assert np.all(np.diff(TK.tokenize(s)) >= 0)


def test_tokenizer_errors():
    with pytest.raises(ValueError):
        TK.tokenize(np.nan)
    with pytest.raises(ValueError):
        TK.detokenize(SOS)


def test_one_hot_helper():
    out = one_hot([2, 0], 4)
    assert np.array_equal(out, [[0, 0, 1, 0], [1, 0, 0, 0]])


# ---------------------------------------------------------------- transformer


@pytest.fixture(scope="module")
def model():
    return TransformerModel(ModelConfig(), rng=np.random.default_rng(1))


def test_t1_shapes_and_determinism(model):
    x = np.array([0.1, -0.2, 0.05, 0.3])
    for i in range(1, 6):
        toks = np.arange(i) % 17
        h = model.t1_forward(x, toks)
        assert h.shape == (i, 16)
        assert np.array_equal(h, model.t1_forward(x, toks))
    with pytest.raises(ValueError):
        model.t1_forward(x, [])
    with pytest.raises(ValueError):
        model.t1_forward(x, [17])


def test_t1_is_causal(model):
    x = np.array([0.1, -0.2, 0.05, 0.3])
    a = model.t1_forward(x, [0, 3, 5, 7])
    b = model.t1_forward(x, [0, 3, 5, 11])
    assert np.array_equal(a[:3], b[:3]) and not np.allclose(a[3], b[3])


def test_split_reproduces_full_model(model):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5, 4))
    toks = rng.integers(0, 17, size=(5, 3))
    H = model.t1_batch(X, toks)
    W = model.W_O
    split = softmax(np.concatenate([H, np.ones(H.shape[:2] + (1,))], axis=-1) @ W)
    assert np.max(np.abs(split - model.probs(X, toks))) <= 1e-10
    assert W.shape == (17, 17)


@pytest.mark.parametrize("y", [2, 3, 4, 5, 6])
def test_preprocess_row_counts(model, y):
    Y = [SOS] + list(range(1, y))
    b = preprocess_pair(model, np.zeros(4), Y)
    assert len(b) == y * (y - 1) // 2 == b.Y_hat.shape[0]
    assert np.all(b.Y_hat.sum(1) == 1) and set(np.unique(b.Y_hat)) <= {0.0, 1.0}
    # rows for prefix length i are T1(X, Y[:i]) with targets Y[1:i+1]
    r = 0
    for i in range(1, y):
        assert np.array_equal(b.H_hat[r:r + i], model.t1_forward(np.zeros(4), Y[:i]))
        assert np.array_equal(b.Y_hat[r:r + i].argmax(1), Y[1:i + 1])
        r += i


def test_preprocess_rejects_short_sequence(model):
    with pytest.raises(ValueError):
        preprocess_pair(model, np.zeros(4), [SOS])


def test_gradients_match_finite_differences():
    m = TransformerModel(ModelConfig(), rng=np.random.default_rng(3))
    for k in m.params:  # move norms and biases off their initial values
        m.params[k] = m.params[k] + 0.05 * np.random.default_rng(4).normal(size=m.params[k].shape)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(4, 4))
    toks = rng.integers(0, 17, size=(4, 2))
    tgt = rng.integers(0, 17, size=(4, 2))
    _, g = m.loss_and_grads(X, toks, tgt)
    h = 1e-6
    for name, grad in g.items():
        flat = m.params[name].reshape(-1)
        for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            lp, _ = m.loss_and_grads(X, toks, tgt)
            flat[idx] = old - h
            lm, _ = m.loss_and_grads(X, toks, tgt)
            flat[idx] = old
            fd = (lp - lm) / (2 * h)
            an = grad.reshape(-1)[idx]
            assert abs(an - fd) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9, name


def test_zero_step_leaves_weights_unchanged():
    m = TransformerModel(ModelConfig(), rng=np.random.default_rng(6))
    before = {k: v.copy() for k, v in m.params.items()}
    rng = np.random.default_rng(7)
    pretrain(m, rng.normal(size=(8, 4)), rng.integers(1, 17, size=8), epochs=1, step_size=0.0)
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_pretraining_loss_decreases():
    m = TransformerModel(ModelConfig(), rng=np.random.default_rng(8))
    rng = np.random.default_rng(9)
    X = rng.normal(size=(64, 4))
    t = 1 + (X[:, 2] > 0).astype(int) * 7
    _, losses = pretrain(m, X, t, epochs=15, step_size=0.05, batch_size=None)
    assert np.all(np.diff(losses) < 0)
    assert token_accuracy(m, X, t) > 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretraining_errors():
    m = TransformerModel(ModelConfig(), rng=np.random.default_rng(10))
    with pytest.raises(ValueError):
        pretrain(m, np.zeros((0, 4)), np.zeros(0))
    with pytest.raises(ValueError):
        pretrain(m, np.zeros((2, 4)), [1, 2], optimizer="lbfgs")
    with pytest.raises(DivergenceError):
        pretrain(m, np.ones((4, 4)) * 1e3, [1, 2, 3, 4], epochs=50, step_size=1e12, batch_size=None)


# ---------------------------------------------------------------- persistence


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    assert all(np.array_equal(model.params[k], back.params[k]) for k in model.params)
    assert back.W_O.shape == (17, 17)


def test_truncated_checkpoint_names_missing_tensor(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    lines = path.read_text().splitlines()
    cut = next(i for i, line in enumerate(lines) if line.startswith("tensor head.W_O"))
    path.write_text("\n".join(lines[:cut]) + "\n")
    with pytest.raises(CheckpointError, match="head.W_O"):
        load_checkpoint(path)


def test_checkpoint_wrong_kind(tmp_path):
    from kbtransformer import checkpoint
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, "weight-state", {"a": np.ones(1)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    S, A = rng.normal(size=(5, 4)), rng.normal(size=5)
    T = TK.tokenize(A)
    path = tmp_path / "d.csv"
    write_dataset_csv(path, S, A, T)
    s, a, t = read_dataset_csv(path)
    assert np.array_equal(s, S) and np.array_equal(a, A) and np.array_equal(t, T)
    path.write_text("x,y\n")
    with pytest.raises(ValueError):
        read_dataset_csv(path)
