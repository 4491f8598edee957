import numpy as np
import pytest

from hmilnet import nn
from hmilnet.hmil import MISSING, Bag, Leaf, Product, SchemaMismatch, graph_schema, random_sample
from hmilnet.model import (ARCH_WIDTHS, ArchitectureError, ArchitectureSpec, CheckpointError,
                           HmilModel, builtin_arch, dumps, load, loads, save)

TINY = ArchitectureSpec(f_hat=(2, 3), f_tilde=(6, 4), g=(16, 3), r_rel=(6, 2), r=(4, 2),
                        n_relations=2, steps=1, name="tiny")


def tiny(steps=1, seed=0):
    arch = ArchitectureSpec.from_dict({**TINY.to_dict(), "steps": steps})
    m = HmilModel.create(arch, ["a", "b"], seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in m.params.items():  # move everything off its init so every path is exercised
        m.params[k] = v + 0.3 * rng.normal(size=v.shape)
    return m


def test_builtin_widths():
    mb = builtin_arch("Mb")
    assert (mb.f_hat, mb.f_tilde, mb.g, mb.r_rel, mb.r) == (
        (2, 10, 10), (6, 30, 30), (120, 60, 60), (70, 20), (220, 100, 2))
    assert 4 * 30 == mb.g[0] and 10 + 60 == mb.r_rel[0] and 11 * 20 == mb.r[0]
    md = builtin_arch("Md")
    assert md.r[0] == 220
    mw = builtin_arch("Mw")
    assert mw.r == (220, 2) and mw.errata and "1320" in mw.errata[0]
    assert ARCH_WIDTHS["Mw"]["r"][0] == 1320
    for name in ARCH_WIDTHS:
        assert builtin_arch(name).audit() == []
    assert builtin_arch("Mb", n_relations=3).r[0] == 60


def test_unknown_arch_and_bad_audit():
    with pytest.raises(ArchitectureError):
        builtin_arch("Mx")
    bad = ArchitectureSpec((2, 10), (6, 30), (100, 5), (15, 2), (4, 2), 2)
    assert any("g input" in p for p in bad.audit())


def test_activation_placement():
    m = HmilModel.create(builtin_arch("Mb", 1), ["r"])
    lv = m._levels[0][0]
    assert [a for *_, a in lv.f_tilde] == ["relu", "tanh"]
    assert [a for *_, a in m._final] == ["relu", "identity"]


def test_output_shape_and_all_missing(rng):
    m = tiny()
    for _ in range(5):
        s = random_sample(m.schema, rng, max_bag=int(rng.integers(0, 6)))
        assert m.forward(s).shape == (2,)
    s = Product([MISSING, MISSING])
    a = m.forward(s)
    h = np.concatenate([m.params["rel0.missing"], m.params["rel1.missing"]])
    expect = m.params["r.0.W"] @ h + m.params["r.0.b"]
    np.testing.assert_allclose(a, expect, rtol=0, atol=1e-14)
    assert np.array_equal(a, m.forward(s))


def test_schema_mismatch_is_reported():
    m = tiny()
    with pytest.raises(SchemaMismatch, match="tuple"):
        m.forward(Product([MISSING]))


def test_hand_composed_forward(rng):
    arch = ArchitectureSpec((2, 3), (6, 4), (16, 3), (6, 2), (2, 2), 1)
    m = HmilModel.create(arch, ["r"], seed=3)
    P = m.params
    for k in P:
        P[k] = P[k] + 0.2 * rng.normal(size=P[k].shape)
    xv, e = rng.normal(size=2), rng.normal(size=6)
    relu = lambda x: np.maximum(x, 0)
    fh = relu(P["rel0.lvl1.f_hat.0.W"] @ xv + P["rel0.lvl1.f_hat.0.b"])
    z = np.tanh(P["rel0.lvl1.f_tilde.0.W"] @ e + P["rel0.lvl1.f_tilde.0.b"])
    tc = P["rel0.lvl1.agg.theta_c"]
    a = np.concatenate([z, z, z, np.abs(z - tc)])
    g = relu(P["rel0.lvl1.g.0.W"] @ a + P["rel0.lvl1.g.0.b"])
    h = relu(P["rel0.lvl1.r_rel.0.W"] @ np.concatenate([fh, g]) + P["rel0.lvl1.r_rel.0.b"])
    logits = P["r.0.W"] @ h + P["r.0.b"]
    s = Product([Product([Leaf(xv), Bag.from_matrix(e[None, :], [3.0])])])
    np.testing.assert_allclose(m.forward(s), logits, rtol=0, atol=1e-9)


def model_grad_error(m, samples, labels):
    def f():
        return nn.weighted_bce(m.forward_batch(samples)[0], labels)[0]

    logits, cache = m.forward_batch(samples)
    _, dl = nn.weighted_bce(logits, labels)
    grads = m.backward(cache, dl)
    worst = 0.0
    for k, p in m.params.items():
        worst = max(worst, nn.rel_error(grads[k], nn.numeric_grad(f, p)))
    return worst


@pytest.mark.parametrize("steps", [1, 2])
def test_end_to_end_gradients(steps, rng):
    m = tiny(steps)
    samples = [random_sample(m.schema, rng, max_bag=3) for _ in range(4)]
    samples.append(Product([MISSING, samples[0].children[1]]))
    samples.append(Product([Product([Leaf(rng.normal(size=2)), Bag()]), MISSING]))
    labels = np.array([1, 0, 1, 0, 1, 0])
    assert model_grad_error(m, samples, labels) < 1e-3


def test_every_parameter_gets_gradient(rng):
    m = tiny()
    samples = [random_sample(m.schema, rng, max_bag=3) for _ in range(6)]
    samples.append(Product([MISSING, Product([Leaf([0.1, 0.2]), Bag()])]))
    samples.append(Product([Product([Leaf([0.1, 0.2]), Bag()]), MISSING]))
    logits, cache = m.forward_batch(samples)
    grads = m.backward(cache, np.ones_like(logits))
    assert set(grads) == set(m.params)
    for k, g in grads.items():
        assert np.any(g != 0), k


def test_permutation_invariance(rng):
    m = tiny()
    mat = rng.normal(size=(7, 6))
    w = rng.uniform(0.5, 2, size=7)
    perm = rng.permutation(7)
    base = Product([Leaf([0.3, 1.0]), Bag.from_matrix(mat, w)])
    shuf = Product([Leaf([0.3, 1.0]), Bag.from_matrix(mat[perm], w[perm])])
    a = m.forward(Product([base, MISSING]))
    b = m.forward(Product([shuf, MISSING]))
    assert np.max(np.abs(a - b)) < 1e-9


def test_checkpoint_roundtrip(tmp_path, rng):
    m = tiny(seed=5)
    path = tmp_path / "m.ckpt"
    save(m, path)
    m2 = load(path)
    assert dumps(m) == dumps(m2) == path.read_bytes()
    samples = [random_sample(m.schema, rng) for _ in range(100)]
    assert np.array_equal(m.forward_batch(samples)[0], m2.forward_batch(samples)[0])
    assert m2.arch == m.arch and m2.relations == m.relations
    assert m2.feature_order == m.feature_order


def test_checkpoint_errors():
    blob = bytearray(dumps(tiny()))
    bad_version = bytearray(blob)
    bad_version[8] = 99
    with pytest.raises(CheckpointError, match="version"):
        loads(bytes(bad_version))
    with pytest.raises(CheckpointError):
        loads(bytes(blob[:-40]))
    flipped = bytearray(blob)
    flipped[len(flipped) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(flipped))
    with pytest.raises(CheckpointError):
        loads(b"not a checkpoint")


def test_graph_schema_matches_model():
    m = tiny(steps=2)
    assert m.schema == graph_schema(2, 2)
