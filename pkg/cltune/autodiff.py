"""Reverse-mode differentiation over a straight tape of numpy arrays.

A :class:`Tape` records every primitive applied to its tensors in
execution order.  Each primitive is a pair of plain functions registered
with :func:`defprimitive`: the forward map from input arrays to an output
array, and the adjoint mapping the output cotangent back onto every
input.  There is no fusion and no graph rewriting; :meth:`Tape.replay`
re-runs the recorded entries and must reproduce the forward values bit
for bit.
"""

from math import sqrt
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
from .errors import CLTuneNumericalError, CLTuneShapeError

__all__ = ('Tensor', 'Tape', 'defprimitive', 'forward', 'backward',
           'central_difference', 'relative_error')

Forward = Callable[..., np.ndarray]
Adjoint = Callable[..., Tuple[Optional[np.ndarray], ...]]

_primitives: Dict[str, Tuple[Forward, Adjoint]] = {}


def defprimitive(name: str, forward: Forward, adjoint: Adjoint) -> None:
	_primitives[name] = (forward, adjoint)


class Tensor(object):
	__slots__ = ('tape', 'index')

	def __init__(self, tape: 'Tape', index: int) -> None:
		self.tape  = tape
		self.index = index

	def __repr__(self) -> str:
		return 'Tensor({}, shape={})'.format(self.index, self.shape)

	@property
	def data(self) -> np.ndarray:
		return self.tape.values[self.index]

	@property
	def shape(self) -> Tuple[int, ...]:
		return self.data.shape


class _Entry(object):
	__slots__ = ('name', 'inputs', 'attrs')

	def __init__(self, name, inputs, attrs):
		self.name   = name
		self.inputs = inputs
		self.attrs  = attrs


class Tape(object):
	__slots__ = ('dtype', 'entries', 'values', 'leaves', 'root')

	def __init__(self, dtype=np.float32) -> None:
		self.dtype = np.dtype(dtype)
		self.entries: List[_Entry] = []
		self.values:  List[np.ndarray] = []
		self.leaves:  List[Tensor] = []
		self.root:    Optional[Tensor] = None

	def __len__(self) -> int:
		return len(self.entries)

	def _push(self, entry: _Entry, value: np.ndarray) -> Tensor:
		self.entries.append(entry)
		self.values.append(value)
		return Tensor(self, len(self.entries) - 1)

	def leaf(self, array) -> Tensor:
		value = np.array(array, dtype=self.dtype)
		tensor = self._push(_Entry('leaf', (), {}), value)
		self.leaves.append(tensor)
		return tensor

	def constant(self, array) -> Tensor:
		return self._push(_Entry('constant', (), {}),
		                  np.array(array, dtype=self.dtype))

	def apply(self, name: str, *inputs: Tensor, **attrs) -> Tensor:
		fwd, _ = _primitives[name]
		for tensor in inputs:
			assert tensor.tape is self
		value = fwd(*(t.data for t in inputs), **attrs)
		if value.dtype != self.dtype:
			value = value.astype(self.dtype)
		if not np.isfinite(value).all():
			raise CLTuneNumericalError('non-finite value from {} at '
			                           'operation {}'
			                           .format(name, len(self.entries)),
			                           index=len(self.entries),
			                           operation=name)
		return self._push(_Entry(name, tuple(t.index for t in inputs),
		                         attrs),
		                  value)

	# Primitive sugar, in the order the registry below defines them

	def add(self, a: Tensor, b: Tensor) -> Tensor:
		return self.apply('add', a, b)

	def sub(self, a: Tensor, b: Tensor) -> Tensor:
		return self.apply('sub', a, b)

	def mul(self, a: Tensor, b: Tensor) -> Tensor:
		return self.apply('mul', a, b)

	def scale(self, a: Tensor, factor: float) -> Tensor:
		return self.apply('scale', a, factor=factor)

	def matmul(self, a: Tensor, b: Tensor) -> Tensor:
		return self.apply('matmul', a, b)

	def tanh(self, a: Tensor) -> Tensor:
		return self.apply('tanh', a)

	def gelu(self, a: Tensor) -> Tensor:
		return self.apply('gelu', a)

	def softmax(self, a: Tensor) -> Tensor:
		return self.apply('softmax', a)

	def layer_norm(self, a: Tensor, eps: float = 1e-5) -> Tensor:
		return self.apply('layer_norm', a, eps=eps)

	def gather(self, table: Tensor, indices) -> Tensor:
		return self.apply('gather', table,
		                  indices=np.asarray(indices, dtype=np.intp))

	def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
		return self.apply('reshape', a, shape=tuple(shape))

	def transpose(self, a: Tensor, axes: Sequence[int]) -> Tensor:
		return self.apply('transpose', a, axes=tuple(axes))

	def slice(self, flat: Tensor, start: int, stop: int,
	          shape: Sequence[int]) -> Tensor:
		return self.apply('slice', flat, start=start, stop=stop,
		                  shape=tuple(shape))

	def concat(self, *parts: Tensor) -> Tensor:
		return self.apply('concat', *parts)

	def sum(self, a: Tensor) -> Tensor:
		return self.apply('sum', a)

	def cross_entropy(self, logits: Tensor, labels) -> Tensor:
		return self.apply('cross_entropy', logits,
		                  labels=np.asarray(labels, dtype=np.intp))

	def soft_cross_entropy(self, logits: Tensor, targets) -> Tensor:
		return self.apply('soft_cross_entropy', logits,
		                  targets=np.asarray(targets, dtype=self.dtype))

	def dense(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
		return self.add(self.matmul(x, weight), bias)

	def replay(self) -> List[np.ndarray]:
		values: List[np.ndarray] = []
		for i, entry in enumerate(self.entries):
			if not entry.inputs and entry.name in ('leaf', 'constant'):
				values.append(self.values[i])
				continue
			fwd, _ = _primitives[entry.name]
			value = fwd(*(values[j] for j in entry.inputs),
			            **entry.attrs)
			values.append(value.astype(self.dtype, copy=False))
		return values

	def backward(self, root: Optional[Tensor] = None
	            ) -> List[Optional[np.ndarray]]:
		root = root if root is not None else self.root
		if root is None or root.data.size != 1:
			raise CLTuneShapeError('tape not rooted at a scalar')
		grads: List[Optional[np.ndarray]] = [None] * len(self.entries)
		grads[root.index] = np.ones(root.shape, dtype=self.dtype)
		for i in range(root.index, -1, -1):
			cotangent = grads[i]
			entry = self.entries[i]
			if cotangent is None or not entry.inputs:
				continue
			_, adjoint = _primitives[entry.name]
			inputs = [self.values[j] for j in entry.inputs]
			partials = adjoint(cotangent, self.values[i], *inputs,
			                   **entry.attrs)
			for j, partial in zip(entry.inputs, partials):
				if partial is None:
					continue
				partial = partial.astype(self.dtype, copy=False)
				if grads[j] is None:
					grads[j] = partial
				else:
					grads[j] = grads[j] + partial
		return grads

	def gradients(self, *leaves: Tensor,
	              root: Optional[Tensor] = None) -> List[np.ndarray]:
		grads = self.backward(root)
		return [grads[leaf.index] if grads[leaf.index] is not None
		        else np.zeros(leaf.shape, dtype=self.dtype)
		        for leaf in leaves]


def forward(graph: Callable[[Tape, Tensor, object], Tensor],
            params,
            batch,
            dtype=np.float32) -> Tuple[float, Tape]:
	"""Evaluate ``graph`` on a fresh tape whose first leaf holds the flat
	   parameter vector.  Returns the scalar loss and the populated tape."""
	tape = Tape(dtype)
	theta = tape.leaf(getattr(params, 'values', params))
	loss = graph(tape, theta, batch)
	if loss.data.size != 1:
		raise CLTuneShapeError('tape not rooted at a scalar')
	tape.root = loss
	return float(loss.data), tape


def backward(tape: Tape) -> np.ndarray:
	if not tape.leaves:
		raise CLTuneShapeError('tape has no parameter leaf')
	gradient, = tape.gradients(tape.leaves[0])
	return gradient


# Shape helpers

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
	while grad.ndim > len(shape):
		grad = grad.sum(axis=0)
	for axis, size in enumerate(shape):
		if size == 1 and grad.shape[axis] != 1:
			grad = grad.sum(axis=axis, keepdims=True)
	return grad


def _broadcastable(a: np.ndarray, b: np.ndarray) -> None:
	try:
		np.broadcast_shapes(a.shape, b.shape)
	except ValueError:
		raise CLTuneShapeError('cannot broadcast {} with {}'
		                       .format(a.shape, b.shape))


def _logsumexp(x: np.ndarray) -> np.ndarray:
	peak = x.max(axis=-1, keepdims=True)
	return peak + np.log(np.exp(x - peak).sum(axis=-1, keepdims=True))


def _softmax(x: np.ndarray) -> np.ndarray:
	e = np.exp(x - x.max(axis=-1, keepdims=True))
	return e / e.sum(axis=-1, keepdims=True)


# Primitive registry

def _add(a, b):
	_broadcastable(a, b)
	return a + b

defprimitive('add', _add,
             lambda g, y, a, b: (_unbroadcast(g, a.shape),
                                 _unbroadcast(g, b.shape)))


def _sub(a, b):
	_broadcastable(a, b)
	return a - b

defprimitive('sub', _sub,
             lambda g, y, a, b: (_unbroadcast(g, a.shape),
                                 _unbroadcast(-g, b.shape)))


def _mul(a, b):
	_broadcastable(a, b)
	return a * b

defprimitive('mul', _mul,
             lambda g, y, a, b: (_unbroadcast(g * b, a.shape),
                                 _unbroadcast(g * a, b.shape)))

defprimitive('scale',
             lambda a, factor: a * a.dtype.type(factor),
             lambda g, y, a, factor: (g * g.dtype.type(factor),))


def _matmul(a, b):
	if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
		raise CLTuneShapeError('matmul shape mismatch: {} @ {}'
		                       .format(a.shape, b.shape))
	return np.matmul(a, b)

def _matmul_adjoint(g, y, a, b):
	ga = np.matmul(g, np.swapaxes(b, -1, -2))
	if b.ndim == 2:
		gb = (a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
	else:
		gb = np.matmul(np.swapaxes(a, -1, -2), g)
	return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

defprimitive('matmul', _matmul, _matmul_adjoint)

defprimitive('tanh', np.tanh, lambda g, y, a: (g * (1 - y * y),))


_GELU_C = sqrt(2 / np.pi)
_GELU_K = 0.044715

def _gelu(a):
	return 0.5 * a * (1 + np.tanh(_GELU_C * (a + _GELU_K * a ** 3)))

def _gelu_adjoint(g, y, a):
	t = np.tanh(_GELU_C * (a + _GELU_K * a ** 3))
	slope = (0.5 * (1 + t) +
	         0.5 * a * (1 - t * t) * _GELU_C * (1 + 3 * _GELU_K * a * a))
	return (g * slope,)

defprimitive('gelu', _gelu, _gelu_adjoint)

defprimitive('softmax', _softmax,
             lambda g, y, a: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def _layer_norm(a, eps):
	centered = a - a.mean(axis=-1, keepdims=True)
	variance = (centered * centered).mean(axis=-1, keepdims=True)
	return centered / np.sqrt(variance + a.dtype.type(eps))

def _layer_norm_adjoint(g, y, a, eps):
	centered = a - a.mean(axis=-1, keepdims=True)
	variance = (centered * centered).mean(axis=-1, keepdims=True)
	inverse = 1 / np.sqrt(variance + a.dtype.type(eps))
	return (inverse * (g - g.mean(axis=-1, keepdims=True) -
	                   y * (g * y).mean(axis=-1, keepdims=True)),)

defprimitive('layer_norm', _layer_norm, _layer_norm_adjoint)


def _gather_adjoint(g, y, table, indices):
	grad = np.zeros_like(table)
	np.add.at(grad, indices, g)
	return (grad,)

defprimitive('gather', lambda table, indices: table[indices],
             _gather_adjoint)

defprimitive('reshape', lambda a, shape: a.reshape(shape),
             lambda g, y, a, shape: (g.reshape(a.shape),))

defprimitive('transpose', lambda a, axes: np.transpose(a, axes),
             lambda g, y, a, axes: (np.transpose(g, np.argsort(axes)),))


def _slice(flat, start, stop, shape):
	if flat.ndim != 1 or not 0 <= start <= stop <= flat.shape[0]:
		raise CLTuneShapeError('cannot slice {}:{} from {}'
		                       .format(start, stop, flat.shape))
	return flat[start:stop].reshape(shape)

def _slice_adjoint(g, y, flat, start, stop, shape):
	grad = np.zeros_like(flat)
	grad[start:stop] = g.reshape(-1)
	return (grad,)

defprimitive('slice', _slice, _slice_adjoint)


def _concat(*parts):
	for part in parts[1:]:
		if part.shape[:-1] != parts[0].shape[:-1]:
			raise CLTuneShapeError('cannot concatenate {} with {}'
			                       .format(parts[0].shape, part.shape))
	return np.concatenate(parts, axis=-1)

def _concat_adjoint(g, y, *parts):
	bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
	return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

defprimitive('concat', _concat, _concat_adjoint)

defprimitive('sum', lambda a: np.asarray(a.sum()),
             lambda g, y, a: (np.broadcast_to(g, a.shape).copy(),))


def _cross_entropy(logits, labels):
	if logits.ndim != 2 or labels.shape != logits.shape[:1]:
		raise CLTuneShapeError('cross-entropy shape mismatch: {} vs {}'
		                       .format(logits.shape, labels.shape))
	rows = np.arange(labels.shape[0])
	nll = _logsumexp(logits)[:, 0] - logits[rows, labels]
	return np.asarray(nll.mean())

def _cross_entropy_adjoint(g, y, logits, labels):
	grad = _softmax(logits)
	grad[np.arange(labels.shape[0]), labels] -= 1
	return (grad * (g / labels.shape[0]),)

defprimitive('cross_entropy', _cross_entropy, _cross_entropy_adjoint)


def _soft_cross_entropy(logits, targets):
	if logits.shape != targets.shape or logits.ndim != 2:
		raise CLTuneShapeError('distillation shape mismatch: {} vs {}'
		                       .format(targets.shape, logits.shape))
	logp = logits - _logsumexp(logits)
	return np.asarray(-(targets * logp).sum(axis=-1).mean())

def _soft_cross_entropy_adjoint(g, y, logits, targets):
	mass = targets.sum(axis=-1, keepdims=True)
	grad = _softmax(logits) * mass - targets
	return (grad * (g / logits.shape[0]),)

defprimitive('soft_cross_entropy', _soft_cross_entropy,
             _soft_cross_entropy_adjoint)


# Finite-difference oracle

def central_difference(f: Callable[[np.ndarray], float],
                       x: np.ndarray,
                       h: float = 1e-3,
                       indices: Optional[Sequence[int]] = None
                      ) -> np.ndarray:
	"""Fourth-order central differences of ``f`` at ``x`` in float64."""
	x = np.array(x, dtype=np.float64)
	indices = range(x.size) if indices is None else indices
	grad = np.zeros(x.size, dtype=np.float64)
	for i in indices:
		saved = x[i]
		values = []
		for step in (2, 1, -1, -2):
			x[i] = saved + step * h
			values.append(f(x))
		x[i] = saved
		grad[i] = (-values[0] + 8 * values[1] - 8 * values[2] +
		           values[3]) / (12 * h)
	return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8
                  ) -> float:
	a = np.asarray(a, dtype=np.float64)
	b = np.asarray(b, dtype=np.float64)
	scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
	return float((np.abs(a - b) / scale).max()) if a.size else 0.0
