import mpmath
import numpy as np
import pytest

from dropnet import checkpoint
from dropnet.data import Batch, Vocabulary
from dropnet.errors import CheckpointVersionError, ConfigError, ContractError, DegenerateMaskError
from dropnet.gradcheck import tiny_model_suite
from dropnet.model import (
    PLACEMENTS,
    PRESETS,
    SITES,
    ModelConfig,
    NLIModel,
    fuse,
    inter_attention,
    intra_attention,
    parse_placement,
    placement_for_model,
    relation_vector,
)
from dropnet.tensor import Tensor

from conftest import grad_error, param

mpmath.mp.dps = 40


def mp_softmax(xs):
    e = [mpmath.e ** mpmath.mpf(x) for x in xs]
    s = sum(e)
    return [v / s for v in e]


# -- intra-attention -----------------------------------------------------------


def test_intra_identical_columns_give_uniform_alpha(rng):
    col = rng.normal(size=4)
    Y = Tensor(np.tile(col, (1, 5, 1)))
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    alpha, R = intra_attention(Y, mask, Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))),
                               Tensor(rng.normal(size=4)))
    np.testing.assert_allclose(alpha.data[0], [1 / 3, 1 / 3, 1 / 3, 0, 0], rtol=0, atol=1e-15)
    assert np.all(R.data[0, 3:] == 0.0)


def test_intra_hand_example():
    # two positions, 2-d states, identity projections, scoring vector [1, 0]
    y = [[1.0, 0.0], [0.0, 2.0]]
    pooled = [(y[0][k] + y[1][k]) / 2 for k in range(2)]
    scores = [mpmath.tanh(mpmath.mpf(y[t][0]) + pooled[0]) for t in range(2)]
    alpha = mp_softmax(scores)
    expected_R = [[float(alpha[t] * y[t][k]) for k in range(2)] for t in range(2)]
    eye = Tensor(np.eye(2))
    a, R = intra_attention(Tensor([y]), np.ones((1, 2)), eye, eye, Tensor([1.0, 0.0]))
    np.testing.assert_allclose(a.data[0], [float(v) for v in alpha], rtol=0, atol=1e-15)
    np.testing.assert_allclose(R.data[0], expected_R, rtol=0, atol=1e-15)
    assert abs(a.data.sum() - 1.0) < 1e-12


def test_intra_gradcheck(rng):
    Y = param(rng.normal(size=(2, 3, 4)))
    Wy, Wh, w = param(rng.normal(size=(4, 4))), param(rng.normal(size=(4, 4))), param(rng.normal(size=4))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    target = Tensor(rng.normal(size=(2, 3, 4)))
    assert grad_error(lambda: (intra_attention(Y, mask, Wy, Wh, w)[1] * target).sum(), Y, Wy, Wh, w) < 1e-6


def test_intra_degenerate_mask(rng):
    with pytest.raises(DegenerateMaskError):
        intra_attention(Tensor(rng.normal(size=(1, 2, 2))), np.zeros((1, 2)), Tensor(np.eye(2)), Tensor(np.eye(2)),
                        Tensor([1.0, 0.0]))


def test_intra_permutation_consistency(rng):
    Y = rng.normal(size=(1, 5, 4))
    mask = np.array([[1, 1, 1, 1, 0]], dtype=float)
    params = [Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4))]
    perm = np.array([2, 0, 4, 3, 1])
    alpha, _ = intra_attention(Tensor(Y), mask, *params)
    alpha_perm, _ = intra_attention(Tensor(Y[:, perm]), mask[:, perm], *params)
    np.testing.assert_allclose(alpha_perm.data, alpha.data[:, perm], rtol=0, atol=1e-14)


# -- inter-attention -----------------------------------------------------------


def test_inter_single_position_copies(rng):
    Rp, Rh = Tensor(rng.normal(size=(1, 1, 3))), Tensor(rng.normal(size=(1, 1, 3)))
    out = inter_attention(Rp, Rh, np.ones((1, 1)), np.ones((1, 1)))
    np.testing.assert_array_equal(out.Rt_p.data, Rh.data)
    np.testing.assert_array_equal(out.Rt_h.data, Rp.data)


def test_inter_convex_combination(rng):
    Rp, Rh = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 5, 3))
    mh = np.array([[1, 1, 1, 0, 0]], dtype=float)
    out = inter_attention(Tensor(Rp), Tensor(Rh), np.ones((1, 4)), mh)
    valid = Rh[0, :3]
    assert np.all(out.Rt_p.data[0] >= valid.min(axis=0) - 1e-12)
    assert np.all(out.Rt_p.data[0] <= valid.max(axis=0) + 1e-12)
    assert np.all(out.weights_p.data[0][:, 3:] == 0.0)


def test_inter_hand_example():
    rp = [[1.0, 0.0], [0.5, 1.0]]
    rh = [[0.0, 2.0], [1.0, -1.0]]
    I = [[sum(mpmath.mpf(rp[i][k]) * rh[j][k] for k in range(2)) for j in range(2)] for i in range(2)]
    row = [mp_softmax(I[i]) for i in range(2)]
    col = [mp_softmax([I[i][j] for i in range(2)]) for j in range(2)]
    rt_p = [[float(sum(row[i][j] * rh[j][k] for j in range(2))) for k in range(2)] for i in range(2)]
    rt_h = [[float(sum(col[j][i] * rp[i][k] for i in range(2))) for k in range(2)] for j in range(2)]
    out = inter_attention(Tensor([rp]), Tensor([rh]), np.ones((1, 2)), np.ones((1, 2)))
    np.testing.assert_allclose(out.interaction.data[0], [[float(v) for v in r] for r in I], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.Rt_p.data[0], rt_p, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.Rt_h.data[0], rt_h, rtol=0, atol=1e-15)


def test_inter_permutation_row_permutes_interaction(rng):
    Rp, Rh = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 3, 3))
    perm = np.array([3, 1, 0, 2])
    base = inter_attention(Tensor(Rp), Tensor(Rh), np.ones((1, 4)), np.ones((1, 3)))
    moved = inter_attention(Tensor(Rp[:, perm]), Tensor(Rh), np.ones((1, 4)), np.ones((1, 3)))
    np.testing.assert_allclose(moved.interaction.data, base.interaction.data[:, perm], rtol=0, atol=1e-14)


def test_inter_gradcheck(rng):
    Rp, Rh = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(2, 2, 4)))
    mp, mh = np.array([[1, 1, 1], [1, 1, 0]], float), np.array([[1, 1], [1, 0]], float)
    w1, w2 = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 2, 4)))

    def loss():
        out = inter_attention(Rp, Rh, mp, mh)
        return (out.Rt_p * w1).sum() + (out.Rt_h * w2).sum()

    assert grad_error(loss, Rp, Rh) < 1e-6


# -- fuse and relation vector -------------------------------------------------


def test_fuse(rng):
    R = Tensor(rng.normal(size=(1, 3, 2)))
    np.testing.assert_array_equal(fuse(Tensor(np.ones((1, 3, 2))), R).data, R.data)
    Rt = np.ones((1, 3, 2))
    Rt[0, 1, 0] = 0.0
    assert fuse(Tensor(Rt), R).data[0, 1, 0] == 0.0
    a, b = param(rng.normal(size=(1, 3, 2))), param(rng.normal(size=(1, 3, 2)))
    assert grad_error(lambda: (fuse(a, b) * fuse(a, b)).sum(), a, b) < 1e-6


def test_relation_single_column(rng):
    Fp, Fh = rng.normal(size=(1, 1, 3)), rng.normal(size=(1, 1, 3))
    out = relation_vector(Tensor(Fp), Tensor(Fh), np.ones((1, 1)), np.ones((1, 1))).data[0]
    np.testing.assert_array_equal(out, np.concatenate([Fp[0, 0], Fp[0, 0], Fh[0, 0], Fh[0, 0]]))


def test_relation_constant_input():
    F = Tensor(np.full((1, 4, 2), 1.5))
    out = relation_vector(F, F, np.ones((1, 4)), np.ones((1, 4))).data
    assert np.all(out == 1.5) and out.shape == (1, 8)


def test_relation_brute_force(rng):
    Fp, Fh = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 2, 4))
    mp, mh = np.array([[1, 1, 0]], float), np.ones((1, 2))
    expected = []
    for F, n in ((Fp, 2), (Fh, 2)):
        rows = F[0, :n]
        expected += [sum(r[k] for r in rows) / n for k in range(4)]
        expected += [max(r[k] for r in rows) for k in range(4)]
    out = relation_vector(Tensor(Fp), Tensor(Fh), mp, mh).data[0]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


# -- placements ----------------------------------------------------------------


def test_placement_examples():
    assert placement_for_model(1) == frozenset()
    assert placement_for_model(12) == frozenset(SITES)
    assert placement_for_model(13) == placement_for_model(9)
    with pytest.raises(ConfigError):
        placement_for_model(14)
    assert len(PLACEMENTS) == 13


def test_parse_placement():
    assert parse_placement("embedding, mlp") == {"embedding", "mlp"}
    assert parse_placement("none") == frozenset()
    with pytest.raises(ConfigError):
        parse_placement("attention")


def test_presets_are_valid():
    for name, preset in PRESETS.items():
        placement_for_model(preset["model_id"])
        assert 0.0 <= preset["drop_rate"] <= 0.5, name


# -- full model ----------------------------------------------------------------


def tiny_model(placement=frozenset(SITES), rate=0.3, seed=0, vocab=12):
    return NLIModel(ModelConfig(vocab_size=vocab, num_classes=3, embedding_dim=6, hidden_units=4,
                                placement=placement, drop_rate=rate, seed=seed))


def random_batch(rng, B=3, Lp=4, Lh=3, vocab=12):
    def side(L):
        lengths = rng.integers(1, L + 1, size=B)
        lengths[0] = L
        idx = np.zeros((B, L), dtype=np.int64)
        for i, n in enumerate(lengths):
            idx[i, :n] = rng.integers(2, vocab, size=n)
        return idx, (idx != 0).astype(float)

    p, pm = side(Lp)
    h, hm = side(Lh)
    return Batch(p, h, pm, hm, rng.integers(0, 3, size=B), np.arange(B))


def test_forward_probabilities(rng):
    model = tiny_model()
    batch = random_batch(rng)
    for mode in ("train", "eval"):
        probs = model.forward(batch, mode).data
        assert probs.shape == (3, 3)
        assert np.all(probs > 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_eval_deterministic(rng):
    model = tiny_model()
    batch = random_batch(rng)
    assert model.forward(batch, "eval").data.tobytes() == model.forward(batch, "eval").data.tobytes()


def test_no_placement_train_equals_eval(rng):
    model = tiny_model(placement=frozenset(), rate=0.5)
    batch = random_batch(rng)
    assert model.forward(batch, "train").data.tobytes() == model.forward(batch, "eval").data.tobytes()


def test_each_site_is_stochastic_in_train_mode(rng):
    batch = random_batch(rng)
    for site in SITES:
        model = tiny_model(placement=frozenset({site}), rate=0.5)
        a, b = model.forward(batch, "train").data, model.forward(batch, "train").data
        assert not np.array_equal(a, b), site


def test_empty_sequence_rejected(rng):
    model = tiny_model()
    with pytest.raises(ContractError):
        model.trace(np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0)), np.ones((1, 2), dtype=np.int64),
                    np.ones((1, 2)))


def test_padding_invariance(rng):
    model = tiny_model()
    batch = random_batch(rng)
    base = model.forward(batch, "eval").data
    pad = lambda a, k: np.concatenate([a, np.zeros((a.shape[0], k), dtype=a.dtype)], axis=1)  # noqa: E731
    padded = Batch(pad(batch.premise, 3), pad(batch.hypothesis, 2), pad(batch.premise_mask, 3),
                   pad(batch.hypothesis_mask, 2), batch.labels, batch.order)
    assert np.abs(model.forward(padded, "eval").data - base).max() < 1e-12


def test_swap_sentences_swaps_relation_halves(rng):
    model = tiny_model()
    b = random_batch(rng, Lp=4, Lh=4)
    fwd = model.trace(b.premise, b.premise_mask, b.hypothesis, b.hypothesis_mask, "eval").relation.data
    rev = model.trace(b.hypothesis, b.hypothesis_mask, b.premise, b.premise_mask, "eval").relation.data
    half = fwd.shape[1] // 2
    np.testing.assert_allclose(fwd[:, :half], rev[:, half:], rtol=0, atol=1e-12)
    np.testing.assert_allclose(fwd[:, half:], rev[:, :half], rtol=0, atol=1e-12)


def test_full_model_gradcheck():
    results = tiny_model_suite(seed=1)
    for mode in ("eval", "train"):
        assert max(results[mode].values()) < 1e-4, results[mode]
    assert set(results["eval"]) >= {"embedding.table", "encoder.fwd.W", "intra.W_y", "intra.w", "classifier.W"}


def test_frozen_embeddings_excluded_from_parameters():
    cfg = ModelConfig(vocab_size=5, embedding_dim=3, hidden_units=2, trainable_embeddings=False)
    model = NLIModel(cfg)
    assert "embedding.table" not in model.parameters()
    assert "embedding.table" in model.state_dict()


# -- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = tiny_model(placement=frozenset({"embedding", "mlp"}), rate=0.2)
    for t in model.state_dict().values():
        t.data[...] += rng.normal(size=t.shape) * 1e-3
    model.embedding.table.data[0] = 0.0
    vocab = Vocabulary(["<pad>", "<unk>"] + [f"tok{i}" for i in range(10)])
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, vocab, ("entailment", "contradiction", "neutral"))
    loaded = checkpoint.load(path)
    assert loaded.model.config == model.config
    assert loaded.vocab.tokens == vocab.tokens
    assert loaded.label_names == ("entailment", "contradiction", "neutral")
    for name, t in model.state_dict().items():
        assert loaded.model.state_dict()[name].data.tobytes() == t.data.tobytes()
    batch = random_batch(rng)
    assert loaded.model.forward(batch).data.tobytes() == model.forward(batch).data.tobytes()


def test_checkpoint_header_layout(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, Vocabulary(), ("a", "b", "c"))
    raw = path.read_bytes()
    header, _, payload = raw.partition(b"\nend\n")
    lines = header.decode().split("\n")
    assert lines[0] == "DROPNET-CHECKPOINT 1"
    tensors = [ln.split() for ln in lines if ln.startswith("tensor ")]
    total = sum(int(np.prod([int(n) for n in t[2].split("x")])) for t in tensors)
    assert len(payload) == 8 * total
    first = model.state_dict()["embedding.table"].data
    np.testing.assert_array_equal(np.frombuffer(payload[: first.nbytes], "<f8").reshape(first.shape), first)


@pytest.mark.parametrize("mutate", [
    lambda b: b.replace(b"DROPNET-CHECKPOINT 1", b"DROPNET-CHECKPOINT 9", 1),
    lambda b: b"garbage" + b,
    lambda b: b[:-8],
    lambda b: b.replace(b"\nend\n", b"\nbogus\n", 1),
])
def test_corrupted_checkpoint(tmp_path, mutate):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, tiny_model(), Vocabulary(), ("a", "b", "c"))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointVersionError):
        checkpoint.load(path)
