from hypothesis import given, settings
from hypothesis.strategies import integers
import numpy as np
from pytest import fixture, raises  # type: ignore

from cltune.autodiff import Tape, backward, central_difference, forward, \
                            relative_error
from cltune.corpus import mask_batch
from cltune.errors import CLTuneNumericalError, CLTuneShapeError
from cltune.model import ModelConfig, init_params, mlm_graph
from cltune.streams import stream


def check_gradient(build, *shapes, seed=0, tolerance=1e-6):
	"""Compare the tape gradient of ``build(tape, *leaves)`` against
	   central differences, one leaf at a time."""
	rng = np.random.default_rng(seed)
	inputs = [rng.normal(size=shape) for shape in shapes]

	tape = Tape(np.float64)
	leaves = [tape.leaf(x) for x in inputs]
	root = build(tape, *leaves)
	grads = tape.gradients(*leaves, root=root)

	for i, (x, grad) in enumerate(zip(inputs, grads)):
		def f(flat, i=i):
			shadow = Tape(np.float64)
			args = [shadow.leaf(flat.reshape(x.shape) if j == i else y)
			        for j, y in enumerate(inputs)]
			return float(build(shadow, *args).data)
		numeric = central_difference(f, x.ravel())
		assert relative_error(grad.ravel(), numeric, 1e-2) < tolerance


def test_add_broadcast():
	check_gradient(lambda t, a, b: t.sum(t.mul(t.add(a, b), t.add(a, b))),
	               (3, 4), (4,))

def test_sub_mul():
	check_gradient(lambda t, a, b: t.sum(t.mul(t.sub(a, b), a)),
	               (2, 3), (2, 3))

def test_scale():
	check_gradient(lambda t, a: t.sum(t.mul(t.scale(a, -0.5), a)), (5,))

def test_matmul_batched():
	check_gradient(lambda t, a, b: t.sum(t.tanh(t.matmul(a, b))),
	               (2, 3, 4), (4, 5))
	check_gradient(lambda t, a, b: t.sum(t.tanh(t.matmul(a, b))),
	               (2, 3, 4), (2, 4, 2))

def test_gelu():
	check_gradient(lambda t, a: t.sum(t.mul(t.gelu(a), a)), (3, 3))

def test_softmax():
	check_gradient(lambda t, a, w: t.sum(t.mul(t.softmax(a), w)),
	               (2, 5), (2, 5))

def test_layer_norm():
	check_gradient(lambda t, a, w: t.sum(t.mul(t.layer_norm(a), w)),
	               (3, 6), (3, 6))

def test_gather_repeated():
	indices = np.array([[0, 2], [2, 2]])
	check_gradient(lambda t, a: t.sum(t.mul(t.gather(a, indices),
	                                        t.gather(a, indices))),
	               (3, 4))

def test_reshape_transpose():
	check_gradient(lambda t, a, w: t.sum(t.mul(
		t.transpose(t.reshape(a, (2, 3, 2)), (1, 0, 2)), w)),
		(12,), (3, 2, 2))

def test_slice_concat():
	check_gradient(lambda t, a: t.sum(t.tanh(t.concat(
		t.slice(a, 0, 4, (2, 2)), t.slice(a, 2, 8, (2, 3))))), (8,))

def test_cross_entropy():
	labels = np.array([1, 0, 3])
	check_gradient(lambda t, a: t.cross_entropy(a, labels), (3, 4))

def test_soft_cross_entropy():
	targets = np.array([[0.2, 0.8, 0.0], [0.5, 0.25, 0.25]])
	check_gradient(lambda t, a: t.soft_cross_entropy(a, targets), (2, 3))

def test_dense():
	check_gradient(lambda t, x, w, b: t.sum(t.tanh(t.dense(x, w, b))),
	               (4, 3), (3, 2), (2,))


def test_cross_entropy_value():
	tape = Tape(np.float64)
	logits = tape.leaf(np.zeros((2, 4)))
	loss = tape.cross_entropy(logits, [0, 3])
	assert abs(float(loss.data) - np.log(4)) < 1e-12

def test_Tape_replay():
	rng = np.random.default_rng(1)
	tape = Tape()
	a = tape.leaf(rng.normal(size=(3, 4)))
	b = tape.leaf(rng.normal(size=(4, 2)))
	y = tape.softmax(tape.gelu(tape.matmul(a, b)))
	tape.sum(tape.layer_norm(y))
	replayed = tape.replay()
	assert len(replayed) == len(tape)
	for value, original in zip(replayed, tape.values):
		assert value.tobytes() == original.tobytes()

def test_Tape_dtype():
	tape = Tape()
	a = tape.leaf([1, 2, 3])
	assert a.data.dtype == np.float32
	assert tape.scale(a, 0.5).data.dtype == np.float32
	assert Tape(np.float64).leaf([1]).data.dtype == np.float64

def test_Tape_nonfinite():
	tape = Tape()
	a = tape.leaf([1e30, 1.0])
	with raises(CLTuneNumericalError, match='non-finite value from scale') \
	     as info:
		tape.scale(a, 1e30)
	assert info.value.index == 1
	assert info.value.operation == 'scale'

def test_Tape_shape_mismatch():
	tape = Tape()
	a = tape.leaf(np.ones((2, 3)))
	b = tape.leaf(np.ones((2, 3)))
	with raises(CLTuneShapeError, match=r'matmul shape mismatch: \(2, 3\) '
	                                    r'@ \(2, 3\)'):
		tape.matmul(a, b)
	with raises(CLTuneShapeError, match='cannot broadcast'):
		tape.add(a, tape.leaf(np.ones(2)))
	with raises(CLTuneShapeError, match='cross-entropy shape mismatch'):
		tape.cross_entropy(a, [0, 1, 2])

def test_Tape_backward_scalar():
	tape = Tape()
	a = tape.leaf(np.ones(3))
	with raises(CLTuneShapeError, match='tape not rooted at a scalar'):
		tape.gradients(a, root=tape.tanh(a))
	with raises(CLTuneShapeError, match='tape not rooted at a scalar'):
		tape.backward()

def test_Tape_unused_leaf():
	tape = Tape()
	a = tape.leaf(np.ones(3))
	b = tape.leaf(np.ones(2))
	ga, gb = tape.gradients(a, b, root=tape.sum(tape.mul(a, a)))
	assert np.array_equal(ga, [2, 2, 2])
	assert np.array_equal(gb, [0, 0])

def test_forward_backward():
	def graph(tape, theta, batch):
		return tape.sum(tape.mul(theta, tape.constant(batch)))
	loss, tape = forward(graph, np.array([1.0, 2.0]), np.array([3.0, 4.0]))
	assert loss == 11.0
	assert np.array_equal(backward(tape), [3.0, 4.0])
	with raises(CLTuneShapeError, match='tape not rooted at a scalar'):
		forward(lambda t, theta, _: t.tanh(theta), np.ones(2), None)

@given(integers(min_value=1, max_value=6))
@settings(deadline=None)
def test_central_difference_cubic(n):
	x = np.linspace(-1, 1, n)
	numeric = central_difference(lambda v: float((v ** 3).sum()), x)
	assert np.allclose(numeric, 3 * x ** 2, atol=1e-9)

def test_central_difference_indices():
	numeric = central_difference(lambda v: float(v @ v), np.ones(4),
	                             indices=[1, 3])
	assert np.allclose(numeric, [0, 2, 0, 2])

def test_relative_error():
	assert relative_error(np.ones(3), np.ones(3)) == 0
	assert abs(relative_error([1.0], [1.1]) - 0.1 / 1.1) < 1e-12
	assert abs(relative_error([0.0], [1e-9]) - 0.1) < 1e-12
	assert relative_error([], []) == 0


@fixture
def tiny():
	return ModelConfig(vocab_size=16, max_seq_len=8, d_model=8, n_layers=1,
	                   n_heads=2, d_ff=16, seed=0)

def test_mlm_gradient_matches_finite_differences(tiny):
	params = init_params(tiny)
	rows = stream(1, 'rows').integers(4, 16, size=(2, 8))
	batch = mask_batch(rows, stream(1, 'masking'), 16)
	graph = mlm_graph(tiny)
	_, tape = forward(graph, params, batch, np.float64)
	analytic = backward(tape)
	numeric = central_difference(
		lambda x: forward(graph, x, batch, np.float64)[0],
		params.values)
	assert analytic.shape == (len(params),)
	assert relative_error(analytic, numeric, 1e-6) <= 1e-4
