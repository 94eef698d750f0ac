import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multicomp import evaluation as ev
from multicomp import geometry as g
from multicomp import networks as nw
from multicomp.data import PartedShape, gen_shape
from multicomp.errors import InvalidInput, InvalidState

from oracles import naive_chamfer, naive_mmd, naive_tmd, naive_uhd

TINY = nw.NetPreset("tiny", n_points=16, n_partial=8, x_dim=8, z_dim=4,
                    encoder_widths=(6, 8, 8, 10, 8), decoder_widths=(12, 12), gan_widths=(10, 12))


@pytest.fixture
def model():
    m = nw.CompletionModel(TINY, seed=3)
    for net in m.networks().values():
        net.mark_trained()
        net.eval()
    return m


def cloud(rng, n=16):
    return rng.uniform(-1, 1, size=(n, 3))


# ---- metric examples

def test_mmd_examples(rng):
    test = [cloud(rng) for _ in range(3)]
    assert ev.mmd(test, test + [cloud(rng)]) == 0.0
    s = np.zeros((1, 3))
    c1, c2 = np.array([[np.sqrt(0.15), 0, 0]]), np.array([[np.sqrt(0.1), 0, 0]])
    assert g.chamfer(s, c1) == pytest.approx(0.3, abs=1e-15)
    assert ev.mmd([s], [c1, c2]) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(InvalidInput):
        ev.mmd([], [s])


def test_tmd_examples(rng):
    c = cloud(rng)
    assert ev.tmd([c, c, c]) == 0.0
    a, b = cloud(rng), cloud(rng)
    assert abs(ev.tmd([a, b]) - 2 * g.chamfer(a, b)) <= 1e-12
    assert ev.tmd([a]) == 0.0
    with pytest.raises(InvalidInput):
        ev.tmd([])


def test_tmd_permutation_invariant(rng):
    comps = [cloud(rng) for _ in range(5)]
    assert ev.tmd(comps) == pytest.approx(ev.tmd(comps[::-1]), abs=1e-12)


def test_uhd_examples(rng):
    c = cloud(rng, 30)
    assert ev.uhd(c[:8], [c, c[::-1]]) == 0.0
    p = np.zeros((1, 3))
    comps = [np.array([[0.1, 0, 0]]), np.array([[0, 0.3, 0]])]
    assert ev.uhd(p, comps) == pytest.approx(0.2, abs=1e-15)


def test_uhd_grows_when_covering_points_removed():
    partial = np.array([[0.0, 0, 0], [1, 0, 0]])
    full = np.array([[0.0, 0, 0], [1, 0, 0], [0.5, 0.5, 0]])
    thinned = full[[0, 2]]
    assert ev.uhd(partial, [thinned]) >= ev.uhd(partial, [full])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mmd_zero_iff_every_test_shape_matched(seed):
    rng = np.random.default_rng(seed)
    test = [cloud(rng, 5) for _ in range(3)]
    gen = [cloud(rng, 5) for _ in range(3)]
    assert ev.mmd(test, gen) > 0
    assert ev.mmd(test, gen + test) == 0.0


# ---- parity with naive references and scale bookkeeping

def test_metrics_match_naive_references(rng):
    for _ in range(50):
        m, n = rng.integers(3, 90, size=2)
        comps = [rng.uniform(-1, 1, size=(n, 3)) for _ in range(3)]
        partial = rng.uniform(-1, 1, size=(m, 3))
        test = [rng.uniform(-1, 1, size=(n, 3)) for _ in range(2)]
        assert abs(g.chamfer(partial, comps[0]) - naive_chamfer(partial, comps[0])) <= 1e-9
        assert abs(ev.tmd(comps) - naive_tmd(comps)) <= 1e-9
        assert abs(ev.uhd(partial, comps) - naive_uhd(partial, comps)) <= 1e-9
        assert abs(ev.mmd(test, comps) - naive_mmd(test, comps)) <= 1e-9


def test_scaled_values_are_exact():
    rep = ev.EvalReport(mmd=0.0123456789, tmd=0.0456, uhd=0.0789)
    assert rep.scaled("mmd") == 0.0123456789 * 1e3
    assert rep.scaled("tmd") == 0.0456 * 1e2
    assert rep.scaled("uhd") == 0.0789 * 1e2
    out = json.loads(rep.to_json())
    for name, factor in ev.SCALES.items():
        assert out["metrics"][name]["scaled"] == out["metrics"][name]["raw"] * factor
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,raw,scaled,scale"
    assert [l.split(",")[0] for l in lines[1:]] == ["mmd", "tmd", "uhd"]


def test_thread_count_does_not_change_results(model, rng):
    partials = [cloud(rng, 8) for _ in range(4)]
    test = [cloud(rng) for _ in range(3)]
    a, _ = ev.evaluate(model, partials, test, k=3, rng=np.random.default_rng(5))
    b, _ = ev.evaluate(model, partials, test, k=3, rng=np.random.default_rng(5), threads=3)
    assert (a.mmd, a.tmd, a.uhd) == (b.mmd, b.tmd, b.uhd)
    assert a.to_json() == b.to_json()


# ---- completion

def test_complete_k_contract(model, rng):
    p = cloud(rng, 8)
    cs = ev.complete_k(model, p, 4, np.random.default_rng(1))
    assert cs.k == 4
    assert all(c.shape == (16, 3) for c in cs.completions)
    assert cs.z.shape == (4, TINY.z_dim)
    again = ev.complete_with_z(model, p, cs.z)
    for x, y in zip(cs.completions, again.completions):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(InvalidInput):
        ev.complete_k(model, p, 0, rng)


def test_untrained_model_refuses_completion(rng):
    m = nw.CompletionModel(TINY)
    with pytest.raises(InvalidState):
        ev.complete_k(m, cloud(rng, 8), 2, rng)


def test_complete_with_reference(model, rng):
    p, ref = cloud(rng, 8), cloud(rng)
    out = ev.complete_with_reference(model, p, ref)
    assert out.shape == (16, 3)
    np.testing.assert_array_equal(out, ev.complete_with_reference(model, p, ref))
    model.vae_encoder.store.buffers["trained"][...] = 0.0
    with pytest.raises(InvalidState):
        ev.complete_with_reference(model, p, ref)


# ---- KNN-latent baseline

def test_knn_self_match_ranks_first(model, rng):
    pool = np.stack([cloud(rng) for _ in range(6)])
    # a partial whose duplication reproduces pool member 2 exactly
    member = np.tile(cloud(rng, 8), (2, 1))
    pool[2] = member
    knn = ev.KnnLatent(model, pool)
    out = knn.query(member[:8], 3)
    np.testing.assert_array_equal(out[0], pool[2])
    assert len(knn.query(member[:8], 1)) == 1
    with pytest.raises(InvalidInput):
        knn.query(member[:8], 7)


def test_knn_baseline_has_diversity(model, rng):
    pool = np.stack([cloud(rng) for _ in range(6)])
    out = ev.KnnLatent(model, pool).query(cloud(rng, 8), 3)
    assert ev.tmd(out) > 0


def test_cosine_similarity_oracle(rng):
    codes, code = rng.normal(size=(5, 4)), rng.normal(size=4)
    want = [float(c @ code / (np.linalg.norm(c) * np.linalg.norm(code))) for c in codes]
    np.testing.assert_allclose(ev.cosine_similarity(codes, code), want, rtol=0, atol=1e-15)


# ---- experiment drivers

def test_latent_export_round_trip(tmp_path, rng):
    blocks = [("a", rng.normal(size=(3, 5))), ("b", rng.normal(size=(3, 5)))]
    ev.write_latents(tmp_path / "l.txt", blocks)
    back = ev.read_latents(tmp_path / "l.txt")
    assert [b[0] for b in back] == ["a", "b"]
    for (_, x), (_, y) in zip(blocks, back):
        np.testing.assert_allclose(x, y, rtol=1e-8, atol=0)


def test_sweep_beta_contract(model, rng, tmp_path):
    from multicomp.training import DESK_CONFIG
    for name in ("ae_encoder", "ae_decoder", "vae_encoder"):
        getattr(model, name).freeze()
    partials = [cloud(rng, 8) for _ in range(4)]
    completes = np.stack([cloud(rng) for _ in range(4)])
    tests = [cloud(rng, 8) for _ in range(2)]
    with pytest.raises(InvalidInput):
        ev.sweep_beta(model, partials, completes, [0.0], DESK_CONFIG, tests)
    rows = ev.sweep_beta(model, partials, completes, [0.0, 7.5], DESK_CONFIG.with_(batch_gan=2), tests,
                         k=3, epochs=2, latent_dir=tmp_path)
    assert [r[0] for r in rows] == [0.0, 7.5]
    assert all(np.isfinite(r[1]) and np.isfinite(r[2]) for r in rows)
    back = ev.read_latents(tmp_path / "latents_beta7.5.txt")
    assert len(back) == 2
    assert all(codes.shape == (3, TINY.x_dim) for _, codes in back)


def test_sweep_incompleteness_contract(model, rng):
    shapes = [PartedShape([(f"p{i}", cloud(rng, 6)) for i in range(5)], "chair") for _ in range(3)]
    rows = ev.sweep_incompleteness(model, shapes, [1, 3], k=3, rng=np.random.default_rng(0))
    assert [r[0] for r in rows] == [1, 3]
    with pytest.raises(InvalidInput):
        ev.sweep_incompleteness(model, shapes, [0, 1])
    with pytest.raises(InvalidInput):
        ev.sweep_incompleteness(model, shapes, [5])


def test_drivers_accept_generated_chairs(model):
    rng = np.random.default_rng(2)
    shapes = [gen_shape("chair", rng, 16) for _ in range(2)]
    rows = ev.sweep_incompleteness(model, shapes, [1, 3], k=2, rng=rng)
    assert len(rows) == 2
