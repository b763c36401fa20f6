import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from distillpool.data import SyntheticDataset, balanced_labels, init_synthetic
from distillpool.errors import ConfigError, NonFiniteError
from distillpool.match import (MatchConfig, PixelMomentum, distill, grad_distance, load_checkpoint, match_loss,
                               syn_update)
from distillpool.models import MAIN_CONVNET, LayerGradients, ModelInstance, ModelSpec, build_model

from conftest import make_dataset
from oracles import central_difference, cosine_distance, linear_softmax_grads, relative_errors

TINY = ModelSpec("convnet", 4, 2, "relu", "instancenorm", "avgpooling")


def _lg(*arrays):
    return LayerGradients(tuple(f"p{i}" for i in range(len(arrays))),
                          tuple(torch.as_tensor(a, dtype=torch.float64) for a in arrays))


def test_distance_identical_orthogonal_opposite():
    a = _lg([1.0, 0.0], [[2.0, 1.0]])
    assert grad_distance(a, a).item() == pytest.approx(0.0, abs=1e-12)
    assert grad_distance(_lg([1.0, 0.0]), _lg([0.0, 3.0])).item() == pytest.approx(1.0, abs=1e-12)
    b = _lg([-1.0, 0.0], [[-2.0, -1.0]])
    assert grad_distance(a, b).item() == pytest.approx(4.0, abs=1e-12)  # two layers at 2 each


def test_distance_zero_conventions():
    z = _lg([0.0, 0.0])
    assert grad_distance(z, z).item() == 0.0
    assert grad_distance(z, _lg([1.0, 2.0])).item() == 1.0


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        grad_distance(_lg([1.0, 2.0]), _lg([1.0, 2.0, 3.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), layers=st.integers(1, 4))
def test_distance_matches_numpy_oracle(seed, layers):
    rng = np.random.default_rng(seed)
    shapes = [tuple(rng.integers(1, 5, size=rng.integers(1, 3))) for _ in range(layers)]
    a = [rng.normal(size=s) for s in shapes]
    b = [rng.normal(size=s) for s in shapes]
    expected = sum(cosine_distance(x, y) for x, y in zip(a, b))
    got = grad_distance(_lg(*a), _lg(*b)).item()
    assert got == pytest.approx(expected, abs=1e-10)
    assert 0.0 <= got <= 2.0 * layers + 1e-12


def test_neuron_granularity_sums_rows():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 0.0], [0.0, -1.0]])
    got = grad_distance(_lg(a), _lg(b), "neuron").item()
    assert got == pytest.approx(0.0 + 2.0)
    assert grad_distance(_lg(a), _lg(b), "layer").item() == pytest.approx(cosine_distance(a, b))


def _linear_model(num_classes=2, seed=0):
    torch.manual_seed(seed)
    net = nn.Sequential(nn.Flatten(), nn.Linear(3 * 32 * 32, num_classes)).double()
    return ModelInstance(None, net, 0)


def test_linear_two_class_match_loss_against_analytic_oracle():
    real = make_dataset(per_class=5, seed=1, dtype=torch.float64, num_classes=2)
    g = torch.Generator().manual_seed(2)
    syn = SyntheticDataset(torch.randn(4, 3, 32, 32, generator=g, dtype=torch.float64), balanced_labels(2, 2), 2)
    model = _linear_model()
    # a batch equal to the class size covers the whole class, so the mean gradient is order-free
    cfg = MatchConfig(real_batch_per_class=5)
    got = match_loss(model, real, syn, np.random.default_rng(0), cfg).item()

    W = model.module[1].weight.detach().numpy()
    b = model.module[1].bias.detach().numpy()

    def mean_grads(xs, ys):
        gs = [linear_softmax_grads(W, b, x.numpy().ravel(), int(y)) for x, y in zip(xs, ys)]
        return np.mean([g[0] for g in gs], axis=0), np.mean([g[1] for g in gs], axis=0)

    expected = 0.0
    for c in range(2):
        rw, rb = mean_grads(real.images[real.labels == c], [c] * 5)
        sw, sb = mean_grads(syn.pixels[2 * c:2 * c + 2], [c, c])
        expected += cosine_distance(rw, sw) + cosine_distance(rb, sb)
    assert got == pytest.approx(expected, abs=1e-6)


def test_match_loss_bounds_and_identical_slice():
    real = make_dataset(per_class=1, seed=3, dtype=torch.float64)
    model = build_model(TINY, 0, dtype=torch.float64)
    n_layers = len(model.params)
    cfg = MatchConfig(real_batch_per_class=1)
    same = SyntheticDataset(real.images.clone(), balanced_labels(1), 1)
    assert match_loss(model, real, same, np.random.default_rng(0), cfg).item() == pytest.approx(0.0, abs=1e-9)
    other = init_synthetic(real, 1, "noise", np.random.default_rng(1))
    other.pixels = other.pixels.double()
    val = match_loss(model, real, other, np.random.default_rng(0), cfg).item()
    assert 0.0 < val <= 2 * n_layers * 10


def test_pixel_gradient_second_order_finite_difference():
    real = make_dataset(per_class=4, seed=4, dtype=torch.float64, num_classes=2)
    model = build_model(ModelSpec("convnet", 4, 2, "swish", "instancenorm", "avgpooling"), 7, dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    pixels = torch.randn(2, 3, 32, 32, generator=g, dtype=torch.float64)
    syn = SyntheticDataset(pixels.clone().requires_grad_(True), balanced_labels(1, 2), 1)
    cfg = MatchConfig(real_batch_per_class=4)

    def loss():
        return match_loss(model, real, syn, np.random.default_rng(0), cfg)

    (analytic,) = torch.autograd.grad(loss(), syn.pixels)
    coords = [(0, 0, 3, 4), (0, 2, 17, 30), (1, 1, 9, 9), (1, 0, 31, 0)]
    num, ana = [], []
    for idx in coords:
        num.append(central_difference(loss, syn.pixels.data, idx, 1e-3))
        ana.append(analytic[idx].item())
    err = relative_errors(num, ana, floor=1e-3 * max(abs(v) for v in ana))
    assert err.max() <= 1e-3


def test_small_pixel_step_descends():
    real = make_dataset(per_class=8, seed=6, dtype=torch.float64)
    model = build_model(TINY, 1, dtype=torch.float64)
    syn = init_synthetic(real, 1, "real", np.random.default_rng(2))
    cfg = MatchConfig(real_batch_per_class=8, eta_img=1e-3)
    before = match_loss(model, real, syn, np.random.default_rng(9), cfg).item()
    _, reported = syn_update(syn, model, real, np.random.default_rng(9), cfg)
    after = match_loss(model, real, syn, np.random.default_rng(9), cfg).item()
    assert reported == pytest.approx(before, abs=1e-12)
    assert after < before


def test_pixel_momentum_matches_torch_sgd():
    p1 = torch.randn(5, dtype=torch.float64)
    p2 = p1.clone().requires_grad_(True)
    ours = PixelMomentum(0.1, 0.5)
    ref = torch.optim.SGD([p2], lr=0.1, momentum=0.5)
    for k in range(4):
        grad = torch.full((5,), float(k + 1), dtype=torch.float64)
        ours.step(p1, grad)
        p2.grad = grad.clone()
        ref.step()
    torch.testing.assert_close(p1, p2.detach(), rtol=0, atol=1e-14)


def _cfg(**kw):
    base = dict(ipc=1, iterations=4, real_batch_per_class=4, seed=3)
    base.update(kw)
    return MatchConfig(**base)


def test_distill_is_deterministic_and_keeps_labels(toy_train):
    a, ta = distill(toy_train, _cfg(iterations=5), spec=TINY)
    b, tb = distill(toy_train, _cfg(iterations=5), spec=TINY)
    assert torch.equal(a.pixels, b.pixels)
    assert [t.match_loss for t in ta] == [t.match_loss for t in tb]
    assert torch.equal(a.labels, balanced_labels(1))
    assert len(ta) == 5 and all(math.isfinite(t.match_loss) for t in ta)
    assert a.provenance["iterations"] == 5 and a.provenance["seed"] == 3


def test_distill_changes_pixels(toy_train):
    init = init_synthetic(toy_train, 1, "real", np.random.default_rng([3, 0, 0]))
    out, _ = distill(toy_train, _cfg(iterations=2), spec=TINY)
    assert not torch.equal(init.pixels, out.pixels)


def test_prefix_consistency(toy_train):
    _, short = distill(toy_train, _cfg(iterations=3), spec=TINY)
    _, long = distill(toy_train, _cfg(iterations=5), spec=TINY)
    assert [t.match_loss for t in short] == [t.match_loss for t in long[:3]]


def test_resume_equals_uninterrupted(toy_train, tmp_path):
    ref, ref_trace = distill(toy_train, _cfg(iterations=5, pool_preset="main-plus-similar", main_prob=0.5))
    ckpt = tmp_path / "ckpt"
    distill(toy_train, _cfg(iterations=2, pool_preset="main-plus-similar", main_prob=0.5), checkpoint_dir=ckpt)
    assert load_checkpoint(ckpt)[0].provenance["iterations"] == 2
    out, trace = distill(toy_train, _cfg(iterations=5, pool_preset="main-plus-similar", main_prob=0.5),
                         checkpoint_dir=ckpt)
    assert torch.equal(out.pixels, ref.pixels)
    assert [(t.sampled_spec, t.match_loss) for t in trace] == [(t.sampled_spec, t.match_loss) for t in ref_trace]


def test_checkpoint_from_other_config_is_ignored(toy_train, tmp_path):
    ckpt = tmp_path / "ckpt"
    distill(toy_train, _cfg(iterations=2, eta_img=0.05), spec=TINY, checkpoint_dir=ckpt)
    out, trace = distill(toy_train, _cfg(iterations=2), spec=TINY, checkpoint_dir=ckpt)
    ref, _ = distill(toy_train, _cfg(iterations=2), spec=TINY)
    assert torch.equal(out.pixels, ref.pixels) and len(trace) == 2


def test_baseline_pool_equals_fixed_main_architecture(toy_train):
    a, ta = distill(toy_train, _cfg(iterations=2, real_batch_per_class=2))
    b, tb = distill(toy_train, _cfg(iterations=2, real_batch_per_class=2), spec=MAIN_CONVNET)
    assert torch.equal(a.pixels, b.pixels)
    assert [t.match_loss for t in ta] == [t.match_loss for t in tb]
    assert {t.sampled_spec for t in ta} == {MAIN_CONVNET.label}


def test_pool_draws_are_recorded_in_trace(toy_train):
    _, trace = distill(toy_train, _cfg(iterations=6, pool_preset="main-plus-similar", main_prob=0.5,
                                       real_batch_per_class=2))
    assert any(t.sampled_spec != MAIN_CONVNET.label for t in trace)


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(ipc=0), dict(eta_img=0.0), dict(pool_preset="x"),
                                 dict(momentum_img=1.0), dict(distance="cosine"), dict(inner_steps=-1)])
def test_invalid_configs_rejected(toy_train, bad):
    with pytest.raises(ConfigError):
        distill(toy_train, _cfg(**bad), spec=TINY)


def test_default_loop_counts():
    assert (MatchConfig(ipc=1).resolved().matched_steps, MatchConfig(ipc=1).resolved().inner_steps) == (1, 1)
    r = MatchConfig(ipc=10).resolved()
    assert (r.matched_steps, r.inner_steps) == (10, 50)
    assert MatchConfig(ipc=10, inner_steps=0).resolved().inner_steps == 0


def test_hashes():
    assert MatchConfig().hash() == MatchConfig(matched_steps=1, inner_steps=1).hash()
    assert MatchConfig().hash() != MatchConfig(seed=1).hash()
    assert MatchConfig(iterations=5).run_hash() == MatchConfig(iterations=9).run_hash()
    assert MatchConfig(iterations=5).hash() != MatchConfig(iterations=9).hash()


def test_non_finite_input_raises_with_context(toy_train):
    bad = make_dataset(per_class=6)
    bad.images[bad.labels == 4] = float("inf")
    with pytest.raises(NonFiniteError) as info:
        distill(bad, _cfg(iterations=3, init="noise"), spec=TINY)
    err = info.value
    assert err.episode == 0
    assert err.config_hash == _cfg(iterations=3, init="noise").hash()
    assert err.trace == []
