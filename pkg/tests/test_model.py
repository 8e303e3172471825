"""Network contracts: shapes, pooling symmetry, causality, loss decomposition."""

import math

import numpy as np
import pytest

from lpsynth import nn, taskgen
from lpsynth.model import Model, ModelConfig
from lpsynth.nn import Tensor
from lpsynth.vq import ShapeError


@pytest.fixture(autouse=True)
def f64():
    with nn.using_dtype(np.float64):
        yield


@pytest.fixture(scope="module")
def toy_model():
    with nn.using_dtype(np.float64):
        cfg = ModelConfig(dialect="toy", embed_dim=16, hidden_dim=32,
                          n_layers=1, n_heads=2, ell=2, k=4)
        return Model(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def toy_tasks():
    gc = taskgen.GenConfig(dialect="toy", n_examples=3, max_expressions=4,
                           max_string_len=24)
    return [taskgen.sample_task(taskgen.task_rng(77, i), gc) for i in range(4)]


def permuted(task, order):
    return taskgen.Task(
        inputs=tuple(task.inputs[i] for i in order),
        outputs=tuple(task.outputs[i] for i in order),
        program=task.program,
    )


# ---------------------------------------------------------------------------
# config


def test_config_defaults_per_dialect():
    assert ModelConfig().k == 40
    assert ModelConfig(dialect="toy").k == 10
    assert ModelConfig(dialect="toy", k=7).k == 7


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dialect="python")
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=130, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(ell=-1)
    with pytest.raises(ValueError):
        ModelConfig(k=1)


def test_config_dict_roundtrip():
    cfg = ModelConfig(dialect="toy", embed_dim=64, ell=3, baseline=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# program encoder


def test_latent_length_law_over_compressions():
    for ell in range(4):
        cfg = ModelConfig(dialect="toy", embed_dim=8, hidden_dim=16,
                          n_layers=1, n_heads=2, ell=ell, k=3)
        m = Model(cfg, np.random.default_rng(1))
        for t in (1, 2, 3, 5, 8, 13, 16):
            ids = np.full((1, t), 3, dtype=np.int64)
            lat, lat_ids, mask = m.program_encode(ids)
            s = int(mask.sum())
            assert s == math.ceil(t / 2 ** ell), (t, ell)
            assert lat.shape == (1, s, 8)
            assert np.all((lat_ids >= 0) & (lat_ids < 3))


def test_program_encode_independent_of_batch_padding(toy_model):
    short = np.array([[3, 4, 5, 6, 7]], dtype=np.int64)
    lat_alone, ids_alone, _ = toy_model.program_encode(short)
    padded = np.zeros((2, 9), dtype=np.int64)
    padded[0, :5] = short[0]
    padded[1] = np.arange(3, 12)
    lat_batch, ids_batch, mask = toy_model.program_encode(padded)
    s = int(mask[0].sum())
    np.testing.assert_allclose(lat_batch.data[0, :s], lat_alone.data[0],
                               atol=1e-12)
    np.testing.assert_array_equal(ids_batch[0, :s], ids_alone[0])


def test_program_encode_rejects_empty_rows(toy_model):
    with pytest.raises(ShapeError):
        toy_model.program_encode(np.zeros((1, 4), dtype=np.int64))


# ---------------------------------------------------------------------------
# spec encoder


def test_encode_spec_shapes_and_purity(toy_model):
    task = taskgen.Task(inputs=("ab", "ab", "xyz"), outputs=("Q", "Q", "RS"))
    arrays = toy_model.prepare_batch([task], with_programs=False)
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    assert e.shape[:3] == (1, 3, 2 + 2)  # longest output + BOS/EOS
    assert keep[0, 0].sum() == 3  # "Q" frames to 3 ids
    # identical examples encode identically
    np.testing.assert_array_equal(e.data[0, 0], e.data[0, 1])


def test_encode_spec_permutation_equivariance(toy_model, toy_tasks):
    task = toy_tasks[0]
    order = [2, 0, 1]
    a = toy_model.prepare_batch([task], with_programs=False)
    b = toy_model.prepare_batch([permuted(task, order)], with_programs=False)
    ea, _ = toy_model.encode_spec(a["inputs"], a["outputs"])
    eb, _ = toy_model.encode_spec(b["inputs"], b["outputs"])
    np.testing.assert_array_equal(eb.data[0], ea.data[0][order])


def test_encode_spec_shape_errors(toy_model):
    with pytest.raises(ShapeError):
        toy_model.encode_spec(np.zeros((2, 8), dtype=int),
                              np.zeros((2, 8), dtype=int))


# ---------------------------------------------------------------------------
# example-permutation invariance of pooled outputs


def test_predictor_and_decoder_invariant_to_example_order(toy_model, toy_tasks):
    task = toy_tasks[1]
    order = [1, 2, 0]
    for t in (task, permuted(task, order)):
        arrays = toy_model.prepare_batch([t])
        e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
        prefix = np.array([[taskgen.BOS_ID, 3, 4]])
        lp = toy_model.predictor_logits(e, keep, prefix)
        lat, _, mask = toy_model.program_encode(arrays["prog_content"])
        dec = toy_model.decoder_logits(e, keep, lat, mask, arrays["prog_in"])
        if t is task:
            lp0, dec0 = lp.data, dec.data
    np.testing.assert_array_equal(lp.data, lp0)
    np.testing.assert_array_equal(dec.data, dec0)


def test_loss_invariant_to_example_order(toy_model, toy_tasks):
    order = [2, 1, 0]
    ref, _ = toy_model.compute_loss(toy_tasks[:2], step=10**6)
    per, _ = toy_model.compute_loss([permuted(t, order) for t in toy_tasks[:2]],
                                    step=10**6)
    assert float(per.total.data) == pytest.approx(float(ref.total.data),
                                                  abs=1e-9)


# ---------------------------------------------------------------------------
# distributions and causality


def test_predictor_rows_are_distributions(toy_model, toy_tasks):
    arrays = toy_model.prepare_batch(toy_tasks[:2])
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    prefix = np.array([[1, 3, 5], [1, 4, 0]])
    logits = toy_model.predictor_logits(e, keep, prefix)
    assert logits.shape == (2, 3, toy_model.cfg.k + 1)
    probs = np.exp(logits.data - logits.data.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)


def test_predictor_causal_prefix_extension(toy_model, toy_tasks):
    arrays = toy_model.prepare_batch(toy_tasks[:1])
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    long = np.array([[1, 3, 4, 5, 6]])
    full = toy_model.predictor_logits(e, keep, long).data
    trunc = toy_model.predictor_logits(e, keep, long[:, :3]).data
    np.testing.assert_allclose(full[:, :3], trunc, atol=1e-9)


def test_decoder_causal_prefix_extension(toy_model, toy_tasks):
    task = max(toy_tasks, key=lambda t: len(t.program.expressions))
    assert len(task.program.expressions) >= 2, "fixture needs a longer program"
    arrays = toy_model.prepare_batch([task])
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    lat, _, mask = toy_model.program_encode(arrays["prog_content"])
    prefix = arrays["prog_in"]
    full = toy_model.decoder_logits(e, keep, lat, mask, prefix).data
    trunc = toy_model.decoder_logits(e, keep, lat, mask, prefix[:, :2]).data
    np.testing.assert_allclose(full[:, :2], trunc, atol=1e-9)


# ---------------------------------------------------------------------------
# latent stream switching


def test_decoder_latent_stream_matters(toy_model, toy_tasks):
    arrays = toy_model.prepare_batch(toy_tasks[:1])
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    lat, _, mask = toy_model.program_encode(arrays["prog_content"])
    with_z = toy_model.decoder_logits(e, keep, lat, mask, arrays["prog_in"])
    without = toy_model.decoder_logits(e, keep, None, None, arrays["prog_in"])
    assert np.max(np.abs(with_z.data - without.data)) > 1e-6


def test_empty_latent_equals_no_latent(toy_model, toy_tasks):
    arrays = toy_model.prepare_batch(toy_tasks[:1])
    e, keep = toy_model.encode_spec(arrays["inputs"], arrays["outputs"])
    d = toy_model.cfg.embed_dim
    empty = Tensor(np.zeros((1, 0, d)))
    a = toy_model.decoder_logits(e, keep, empty, np.zeros((1, 0), bool),
                                 arrays["prog_in"])
    b = toy_model.decoder_logits(e, keep, None, None, arrays["prog_in"])
    np.testing.assert_array_equal(a.data, b.data)


def test_baseline_mode_ignores_latent(toy_tasks):
    cfg = ModelConfig(dialect="toy", embed_dim=16, hidden_dim=32, n_layers=1,
                      n_heads=2, ell=2, k=4, baseline=True)
    m = Model(cfg, np.random.default_rng(3))
    arrays = m.prepare_batch(toy_tasks[:1])
    e, keep = m.encode_spec(arrays["inputs"], arrays["outputs"])
    z1 = Tensor(np.random.default_rng(4).normal(size=(1, 3, 16)))
    z2 = Tensor(np.random.default_rng(5).normal(size=(1, 3, 16)))
    keep3 = np.ones((1, 3), dtype=bool)
    a = m.decoder_logits(e, keep, z1, keep3, arrays["prog_in"])
    b = m.decoder_logits(e, keep, z2, keep3, arrays["prog_in"])
    np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# loss


def test_loss_parts_nonnegative_and_sum(toy_model, toy_tasks):
    for step in (0, 10**6):
        parts, _ = toy_model.compute_loss(toy_tasks, step=step)
        vals = parts.as_floats()
        for key in ("autoencoder", "latent", "end_to_end", "commitment"):
            assert vals[key] >= 0.0, key
        assert vals["total"] == pytest.approx(
            vals["autoencoder"] + vals["latent"] + vals["end_to_end"]
            + vals["commitment"], abs=1e-6)


def test_pretraining_schedule_gates_end_to_end(toy_model, toy_tasks):
    pre, _ = toy_model.compute_loss(toy_tasks[:2], step=5, pretrain_steps=10)
    post, _ = toy_model.compute_loss(toy_tasks[:2], step=10, pretrain_steps=10)
    assert pre.end_to_end == 0.0
    assert post.end_to_end > 0.0


def test_loss_aux_supports_ema(toy_model, toy_tasks):
    parts, aux = toy_model.compute_loss(toy_tasks[:2], step=10**6)
    mask = aux["latent_mask"]
    assert aux["encoded"].shape[:2] == mask.shape
    assert aux["latent_ids"].shape == mask.shape
    valid_ids = aux["latent_ids"][mask]
    assert np.all((valid_ids >= 0) & (valid_ids < toy_model.cfg.k))
    before = toy_model.codebook.rows.data.copy()
    toy_model.codebook.ema_update(aux["encoded"][mask], valid_ids)
    assert np.any(toy_model.codebook.rows.data != before)
    # restore module-scoped state for other tests
    toy_model.codebook.rows.data = before


def test_gradient_separation(toy_model, toy_tasks):
    toy_model.zero_grad()
    parts, _ = toy_model.compute_loss(toy_tasks[:2], step=10**6)
    parts.total.backward()
    assert toy_model.codebook.rows.grad is None
    assert toy_model.codebook.ema_sums.grad is None
    assert toy_model.pretrain_embed.table.grad is None  # only used pretraining
    assert toy_model.prog_embed_enc.table.grad is not None
    assert toy_model.latent_specials.table.grad is not None

    toy_model.zero_grad()
    parts, _ = toy_model.compute_loss(toy_tasks[:2], step=0)
    parts.total.backward()
    assert toy_model.codebook.rows.grad is None
    assert toy_model.pretrain_embed.table.grad is not None
    toy_model.zero_grad()


def test_prepare_batch_validation(toy_model, toy_tasks):
    with pytest.raises(ShapeError):
        toy_model.prepare_batch([])
    lopsided = taskgen.Task(inputs=("a",), outputs=("b",))
    with pytest.raises(ShapeError):
        toy_model.prepare_batch([toy_tasks[0], lopsided], with_programs=False)
    with pytest.raises(ShapeError):
        toy_model.prepare_batch([taskgen.Task(inputs=("a",), outputs=("b",))])


def test_full_loss_finite_diff():
    cfg = ModelConfig(dialect="toy", embed_dim=8, hidden_dim=12, n_layers=1,
                      n_heads=2, ell=1, k=3)
    m = Model(cfg, np.random.default_rng(11))
    gc = taskgen.GenConfig(dialect="toy", n_examples=2, max_expressions=2,
                           max_string_len=14)
    tasks = [taskgen.sample_task(taskgen.task_rng(13, i), gc) for i in range(2)]
    for step in (10**6, 0):
        # linearize the quantizer at the reference point; the raw assignment
        # map is piecewise constant and cannot agree with finite differences
        _, aux = m.compute_loss(tasks, step=step)
        err = nn.finite_diff_check(
            lambda: m.compute_loss(tasks, step=step, frozen=aux)[0].total,
            m.parameters(), max_coords_per_param=3)
        assert err < 1e-4, step


# ---------------------------------------------------------------------------
# inference helpers


def test_inference_helpers_deterministic(toy_model, toy_tasks):
    task = toy_tasks[2]
    c1 = toy_model.encode_task(task)
    c2 = toy_model.encode_task(task)
    np.testing.assert_array_equal(c1.e, c2.e)
    prefix = np.array([[taskgen.BOS_ID], [taskgen.BOS_ID]])
    lp = toy_model.latent_logprobs(c1, prefix)
    assert lp.shape == (2, toy_model.cfg.k + 1)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(lp[0], lp[1])  # identical prefixes

    code = np.array([0, 2, 1])
    pp = toy_model.program_logprobs(c1, code, np.array([[taskgen.BOS_ID]]))
    assert pp.shape == (1, len(toy_model.program_vocab))
    np.testing.assert_allclose(np.exp(pp).sum(-1), 1.0, atol=1e-6)
    pp_empty = toy_model.program_logprobs(c1, np.array([], dtype=int),
                                          np.array([[taskgen.BOS_ID]]))
    assert pp_empty.shape == pp.shape
