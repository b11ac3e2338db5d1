"""A tiny BERT-style encoder with a masked-token prediction head.

All parameters live in one flat float32 vector whose order is fixed by
:func:`layout`: token and position embeddings with their layer norm, then
each block in index order, then the output head.  Graphs carve their
weights out of that vector with ``slice`` entries, so a single backward
pass yields the gradient in the same order.
"""

from logging import getLogger
from math import sqrt
from typing import Dict, List, Sequence, Tuple
import numpy as np

from .autodiff import Tape, Tensor, backward, forward
from .errors import CLTuneConfigError, CLTuneMismatchError, CLTuneShapeError
from .streams import stream
from .typing import Object, digest, member

__all__ = ('ModelConfig', 'ParamVector', 'layout', 'parameter_count',
           'parameter_groups', 'init_params', 'flatten', 'mlm_graph',
           'mlm_loss', 'loss_and_gradient', 'masked_logits',
           'mlm_logits', 'token_losses', 'encode', 'pooled_output',
           'hidden_representations')

logger = getLogger(__name__)

_ATTENTION_FLOOR = -1e9


class ModelConfig(Object):
	vocab_size:  member[int] = member('vocab_size')
	max_seq_len: member[int] = member('max_seq_len')
	d_model:     member[int] = member('d_model')
	n_layers:    member[int] = member('n_layers')
	n_heads:     member[int] = member('n_heads')
	d_ff:        member[int] = member('d_ff')
	seed:        member[int] = member('seed')

	def check(self) -> 'ModelConfig':
		for name in ('vocab_size', 'max_seq_len', 'd_model', 'n_layers',
		             'n_heads', 'd_ff'):
			if getattr(self, name) <= 0:
				raise CLTuneConfigError('{} must be positive'
				                        .format(name))
		if self.vocab_size < 4:
			raise CLTuneConfigError('vocab_size leaves no room for '
			                        'special tokens')
		if self.d_model % self.n_heads:
			raise CLTuneConfigError('n_heads does not divide d_model')
		if not 0 <= self.seed < 2**64:
			raise CLTuneConfigError('seed out of range')
		return self

	def digest(self) -> str:
		return digest(self)


def layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
	V, d, f = config.vocab_size, config.d_model, config.d_ff
	shapes = [('tok_emb',     (V, d)),
	          ('pos_emb',     (config.max_seq_len, d)),
	          ('emb_ln_gain', (d,)),
	          ('emb_ln_bias', (d,))]
	for i in range(config.n_layers):
		block = 'block{}.'.format(i)
		shapes.extend((block + name, shape) for name, shape in (
			('wq', (d, d)), ('bq', (d,)),
			('wk', (d, d)), ('bk', (d,)),
			('wv', (d, d)), ('bv', (d,)),
			('wo', (d, d)), ('bo', (d,)),
			('ln1_gain', (d,)), ('ln1_bias', (d,)),
			('w1', (d, f)), ('b1', (f,)),
			('w2', (f, d)), ('b2', (d,)),
			('ln2_gain', (d,)), ('ln2_bias', (d,)),
		))
	shapes.extend([('head_w', (d, V)), ('head_b', (V,))])
	return shapes


def _offsets(config: ModelConfig
            ) -> Dict[str, Tuple[int, int, Tuple[int, ...]]]:
	offsets = {}
	start = 0
	for name, shape in layout(config):
		stop = start + int(np.prod(shape))
		offsets[name] = (start, stop, shape)
		start = stop
	return offsets


def parameter_count(config: ModelConfig) -> int:
	return sum(int(np.prod(shape)) for _, shape in layout(config))


def parameter_groups(config: ModelConfig) -> Dict[str, np.ndarray]:
	"""Boolean masks over the flat vector: ``embeddings``, ``block<i>``
	   and ``head``."""
	total = parameter_count(config)
	groups: Dict[str, np.ndarray] = {}
	for name, (start, stop, _) in _offsets(config).items():
		if name.startswith('block'):
			group = name.split('.', 1)[0]
		elif name.startswith('head'):
			group = 'head'
		else:
			group = 'embeddings'
		mask = groups.setdefault(group, np.zeros(total, dtype=bool))
		mask[start:stop] = True
	return groups


class ParamVector(object):
	"""An immutable flat parameter vector tied to the config that lays
	   it out."""

	__slots__ = ('values', 'config')

	def __init__(self, values, config: ModelConfig) -> None:
		values = np.array(values, dtype=np.float32)
		expected = parameter_count(config)
		if values.shape != (expected,):
			raise CLTuneShapeError('parameter vector shape mismatch: '
			                       '{} vs {}'.format(values.shape,
			                                         (expected,)))
		values.setflags(write=False)
		self.values = values
		self.config = config

	def __repr__(self) -> str:
		return 'ParamVector(<{} values>, {})'.format(len(self),
		                                             self.config_hash[:12])

	def __len__(self) -> int:
		return self.values.shape[0]

	def __eq__(self, other):
		if not isinstance(other, ParamVector):
			return NotImplemented
		return (self.config_hash == other.config_hash and
		        self.values.tobytes() == other.values.tobytes())

	__hash__ = None  # type: ignore

	@property
	def config_hash(self) -> str:
		return self.config.digest()

	def replace(self, values) -> 'ParamVector':
		return ParamVector(values, self.config)

	def unflatten(self) -> Dict[str, np.ndarray]:
		return {name: self.values[start:stop].reshape(shape)
		        for name, (start, stop, shape)
		        in _offsets(self.config).items()}

	def check_compatible(self, other: 'ParamVector', what: str) -> None:
		if other.config_hash != self.config_hash:
			raise CLTuneMismatchError('{} has config hash {}, expected {}'
			                          .format(what, other.config_hash,
			                                  self.config_hash))


def flatten(arrays: Dict[str, np.ndarray], config: ModelConfig
           ) -> ParamVector:
	parts = []
	for name, shape in layout(config):
		CLTuneShapeError.check(name, np.shape(arrays[name]), shape)
		parts.append(np.asarray(arrays[name], dtype=np.float32).ravel())
	return ParamVector(np.concatenate(parts), config)


def init_params(config: ModelConfig) -> ParamVector:
	config.check()
	rng = stream(config.seed, 'init')
	parts = []
	for name, shape in layout(config):
		if name.endswith('_gain'):
			parts.append(np.ones(shape))
		elif len(shape) == 1:
			parts.append(np.zeros(shape))
		else:
			bound = 1 / sqrt(shape[0])
			parts.append(rng.uniform(-bound, bound, size=shape))
	params = ParamVector(np.concatenate([p.ravel() for p in parts]), config)
	logger.debug('initialized %d parameters', len(params))
	return params


# Graph construction

def _slices(tape: Tape, theta: Tensor, config: ModelConfig
           ) -> Dict[str, Tensor]:
	return {name: tape.slice(theta, start, stop, shape)
	        for name, (start, stop, shape) in _offsets(config).items()}


def _affine_norm(tape, x, gain, bias):
	return tape.add(tape.mul(tape.layer_norm(x), gain), bias)


def _check_ids(config: ModelConfig, input_ids: np.ndarray) -> None:
	if input_ids.ndim != 2:
		raise CLTuneShapeError('input ids must be a matrix, not {}'
		                       .format(input_ids.shape))
	if input_ids.shape[1] > config.max_seq_len:
		raise CLTuneShapeError('sequence length {} exceeds {}'
		                       .format(input_ids.shape[1],
		                               config.max_seq_len))
	if input_ids.size and (input_ids.min() < 0 or
	                       input_ids.max() >= config.vocab_size):
		raise CLTuneConfigError('token id out of range')


def _block(tape: Tape, x: Tensor, p: Dict[str, Tensor], prefix: str,
           bias: Tensor, config: ModelConfig) -> Tensor:
	B, L, d = x.shape
	h = config.n_heads
	k = d // h

	def heads(w, b, axes):
		y = tape.reshape(tape.dense(x, p[prefix + w], p[prefix + b]),
		                 (B, L, h, k))
		return tape.transpose(y, axes)

	q = heads('wq', 'bq', (0, 2, 1, 3))   # B h L k
	kt = heads('wk', 'bk', (0, 2, 3, 1))  # B h k L
	v = heads('wv', 'bv', (0, 2, 1, 3))   # B h L k
	scores = tape.add(tape.scale(tape.matmul(q, kt), 1 / sqrt(k)), bias)
	context = tape.matmul(tape.softmax(scores), v)
	context = tape.reshape(tape.transpose(context, (0, 2, 1, 3)),
	                       (B, L, d))
	attended = tape.dense(context, p[prefix + 'wo'], p[prefix + 'bo'])
	x = _affine_norm(tape, tape.add(x, attended),
	                 p[prefix + 'ln1_gain'], p[prefix + 'ln1_bias'])
	inner = tape.gelu(tape.dense(x, p[prefix + 'w1'], p[prefix + 'b1']))
	outer = tape.dense(inner, p[prefix + 'w2'], p[prefix + 'b2'])
	return _affine_norm(tape, tape.add(x, outer),
	                    p[prefix + 'ln2_gain'], p[prefix + 'ln2_bias'])


def encode(tape: Tape, theta: Tensor, config: ModelConfig, batch
          ) -> Tuple[List[Tensor], Dict[str, Tensor]]:
	"""Hidden states after the embedding layer and after every block,
	   each B×L×d, plus the parameter slices used to build them."""
	input_ids = np.asarray(batch.input_ids)
	_check_ids(config, input_ids)
	p = _slices(tape, theta, config)
	x = tape.add(tape.gather(p['tok_emb'], input_ids),
	             tape.gather(p['pos_emb'], np.arange(input_ids.shape[1])))
	x = _affine_norm(tape, x, p['emb_ln_gain'], p['emb_ln_bias'])
	bias = tape.constant(np.where(np.asarray(batch.attention_mask), 0.0,
	                              _ATTENTION_FLOOR)[:, None, None, :])
	states = [x]
	for i in range(config.n_layers):
		x = _block(tape, x, p, 'block{}.'.format(i), bias, config)
		states.append(x)
	return states, p


def _pool(tape: Tape, state: Tensor, mask: np.ndarray) -> Tensor:
	B, _, d = state.shape
	weights = mask.astype(np.float64)
	weights /= np.maximum(weights.sum(axis=1, keepdims=True), 1)
	pooled = tape.matmul(tape.constant(weights[:, None, :]), state)
	return tape.reshape(pooled, (B, d))


def pooled_output(tape: Tape, theta: Tensor, config: ModelConfig, batch
                 ) -> Tensor:
	states, _ = encode(tape, theta, config, batch)
	return _pool(tape, states[-1], np.asarray(batch.attention_mask))


def mlm_logits(tape: Tape, theta: Tensor, config: ModelConfig, batch
           ) -> Tensor:
	if not len(batch.labels):
		raise CLTuneConfigError('no masked positions in batch')
	states, p = encode(tape, theta, config, batch)
	B, L, d = states[-1].shape
	flat = tape.reshape(states[-1], (B * L, d))
	selected = tape.gather(flat, batch.flat_positions)
	return tape.dense(selected, p['head_w'], p['head_b'])


def mlm_graph(config: ModelConfig):
	def graph(tape: Tape, theta: Tensor, batch) -> Tensor:
		return tape.cross_entropy(mlm_logits(tape, theta, config, batch),
		                          batch.labels)
	return graph


def mlm_loss(params: ParamVector, batch, dtype=np.float32) -> float:
	loss, _ = forward(mlm_graph(params.config), params, batch, dtype)
	return loss


def loss_and_gradient(params: ParamVector, batch, dtype=np.float32
                     ) -> Tuple[float, np.ndarray]:
	loss, tape = forward(mlm_graph(params.config), params, batch, dtype)
	return loss, backward(tape)


def masked_logits(params: ParamVector, batch) -> np.ndarray:
	tape = Tape()
	theta = tape.leaf(params.values)
	return mlm_logits(tape, theta, params.config, batch).data


def token_losses(params: ParamVector, batch) -> np.ndarray:
	"""Per masked position negative log-likelihood, in float64."""
	logits = masked_logits(params, batch).astype(np.float64)
	peak = logits.max(axis=-1)
	logz = peak + np.log(np.exp(logits - peak[:, None]).sum(axis=-1))
	return logz - logits[np.arange(len(batch.labels)), batch.labels]


def hidden_representations(params: ParamVector, batch, chunk: int = 256
                          ) -> np.ndarray:
	"""Mean-pooled hidden states of every layer, concatenated per row:
	   an array of shape B × (n_layers + 1)·d_model."""
	config = params.config
	rows = []
	for start in range(0, len(batch.input_ids), chunk):
		part = _Rows(batch.input_ids[start:start+chunk],
		             batch.attention_mask[start:start+chunk])
		tape = Tape()
		theta = tape.leaf(params.values)
		states, _ = encode(tape, theta, config, part)
		pooled = [_pool(tape, state, part.attention_mask)
		          for state in states]
		rows.append(tape.concat(*pooled).data)
	if not rows:
		return np.zeros((0, (config.n_layers + 1) * config.d_model),
		                dtype=np.float32)
	return np.concatenate(rows)


class _Rows(object):
	__slots__ = ('input_ids', 'attention_mask')

	def __init__(self, input_ids: Sequence, attention_mask: Sequence):
		self.input_ids      = np.asarray(input_ids)
		self.attention_mask = np.asarray(attention_mask, dtype=bool)
