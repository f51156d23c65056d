import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmam.layers import ConvStack, default_layers
from cmam.memory import MemoryConfig, MemoryState
from cmam.model import (CmamParams, CrnnParams, Model, backward_sweep, bilstm_stack, cmam_forward, crnn_forward,
                        forward_sweep, output_project, run_refinements)
from cmam.tensor import Tape, Tensor, backward, stack, tsum

MEM = MemoryConfig(4, 8, 2)
F, H, V = 12, 10, 5


def head(L=1, seed=0):
    return CmamParams.init(np.random.default_rng(seed), MEM, F, H, V, L)


def inputs(T, seed=1, grad=False):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=F), requires_grad=grad, name=f"x{t}") for t in range(T)]


def input_grads(out_fn, xs):
    with Tape() as tape:
        loss = out_fn()
    backward(loss, tape, xs)
    return [np.abs(x.grad).max() for x in xs]


def test_backward_sweep_single_step_and_causality():
    p = head()
    xs = inputs(1)
    (ob,) = backward_sweep(p, xs)
    assert ob.shape == (H,)
    xs = inputs(4, grad=True)
    g = input_grads(lambda: tsum(backward_sweep(p, xs)[2]), xs)
    assert g[0] == 0.0 and g[1] == 0.0
    assert g[2] > 0 and g[3] > 0


def test_backward_sweep_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        backward_sweep(head(), [Tensor(np.zeros(F + 1))])


def test_level0_sees_future_through_backward_controller():
    p = head(L=0)
    xs = inputs(4, grad=True)

    def ys1():
        ob = backward_sweep(p, xs)
        return tsum(forward_sweep(p, xs, ob, MemoryState.initial(MEM))[2][1])

    assert input_grads(ys1, xs)[3] > 0


@pytest.mark.parametrize("L", [0, 1, 2])
def test_pass_count_and_memory_persistence(L):
    p = head(L)
    trace = {}
    ys, reads = run_refinements(p, inputs(3), trace)
    assert trace["backward_sweeps"] == L + 1 and trace["forward_sweeps"] == L + 1
    assert len(trace["memory_in"]) == L + 1
    assert not trace["memory_in"][0].any()
    for level in range(1, L + 1):
        assert np.array_equal(trace["memory_in"][level], trace["memory_out"][level - 1])
    assert len(ys) == 3 and ys[0].shape == (F,) and reads[0].shape == (MEM.read_heads * MEM.width,)


def test_second_pass_consumes_short_term_outputs():
    p = head(L=1)
    trace = {}
    xs = inputs(1)
    run_refinements(p, xs, trace)
    level0, level1 = trace["inputs"]
    assert level0[0] is xs[0]
    assert level1[0] is not xs[0]
    ys0, _ = run_refinements(head(L=0), xs)
    assert np.array_equal(level1[0].data, ys0[0].data)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2))
def test_output_shapes(T, L):
    p = head(L)
    ys, reads = run_refinements(p, inputs(T))
    assert len(ys) == T and all(y.shape == (F,) for y in ys)
    assert output_project(p, ys, reads).shape == (T, V + 1)


def causal_head(L):
    """Head whose backward controller reaches nothing but the next level's input."""
    p = head(L, seed=3)
    p.w_xi.data[H:] = 0.0
    p.w_s.data[H:] = 0.0
    p.w_y.data[:F] = 0.0  # outputs depend on the memory read alone
    return p


def test_refinement_opens_future_path_through_memory():
    xs = inputs(4, grad=True)

    def first_output(p):
        return lambda: tsum(output_project(p, *run_refinements(p, xs))[0])

    g0 = input_grads(first_output(causal_head(0)), xs)
    assert g0[1:] == [0.0, 0.0, 0.0]
    g1 = input_grads(first_output(causal_head(1)), xs)
    assert all(g > 1e-12 for g in g1[1:])


def test_output_project_constant_bias():
    p = head()
    p.w_y.data[:] = 0.0
    p.b_out.data = np.arange(V + 1, dtype=float)
    ys, reads = run_refinements(p, inputs(3))
    out = output_project(p, ys, reads).data
    assert np.array_equal(out, np.tile(np.arange(V + 1.0), (3, 1)))


def test_full_model_extent_and_determinism():
    rng = np.random.default_rng(4)
    cnn = ConvStack.init(rng, default_layers((4, 4, 4, 4)), feature_width=F)
    model = Model("cmam", cnn, head())
    img = rng.uniform(size=(32, 16))
    a = cmam_forward(cnn, model.head, Tensor(img)).data
    assert a.shape == (4, V + 1)
    batch = model.logits(Tensor(np.stack([img, img])[:, None])).data
    assert np.array_equal(batch[0], batch[1])
    assert np.allclose(batch[0], a, atol=1e-12)


@pytest.mark.parametrize("kind", ["cmam", "crnn"])
def test_padded_batch_matches_single_images(kind):
    rng = np.random.default_rng(6)
    cnn = ConvStack.init(rng, default_layers((4, 4, 4, 4)), feature_width=F)
    model = Model(kind, cnn, head() if kind == "cmam" else CrnnParams.init(rng, F, 6, V))
    widths = [13, 24, 18]
    images = [rng.uniform(size=(32, w)) for w in widths]
    padded = np.zeros((3, 1, 32, max(widths)))
    for i, im in enumerate(images):
        padded[i, 0, :, :im.shape[1]] = im
    batch = model.logits(Tensor(padded), widths=widths).data
    for i, im in enumerate(images):
        alone = model.logits(Tensor(im[None, None])).data[0]
        assert np.allclose(batch[i, :len(alone)], alone, atol=1e-12)

def test_crnn_shape_and_bidirectionality():
    rng = np.random.default_rng(5)
    cnn = ConvStack.init(rng, default_layers((4, 4, 4, 4)), feature_width=F)
    crnn = CrnnParams.init(rng, F, 6, V)
    img = Tensor(rng.uniform(size=(32, 16)))
    assert crnn_forward(cnn, crnn, img).shape == cmam_forward(cnn, head(), img).shape
    xs = inputs(4, grad=True)
    g = input_grads(lambda: tsum(bilstm_stack(crnn, stack(xs, 0))[0]), xs)
    assert all(v > 0 for v in g[1:])


def test_model_names_are_unique_and_complete():
    rng = np.random.default_rng(6)
    cnn = ConvStack.init(rng, default_layers((4, 4, 4, 4)), feature_width=F)
    model = Model("cmam", cnn, head())
    names = list(model.named)
    assert len(names) == len(set(names))
    assert len(model.parameters()) == len(cnn.tensors()) + len(model.head.tensors())
