"""Continual-learning strategies over flat parameter vectors.

Penalties, the rehearsal loss, distillation and the gradient projection
are plain functions of numpy vectors.  :func:`strategy_step` ties them to
the model: it measures the target loss on a batch, adds whatever the
strategy adds, and returns the gradient the optimizer should follow.
"""

from logging import getLogger
from typing import Callable, Iterable, Optional, Tuple
import numpy as np

from .autodiff import Tape, backward, forward
from .corpus import RowSampler, mask_batch
from .errors import CLTuneConfigError, CLTuneNumericalError, CLTuneShapeError
from .model import ParamVector, loss_and_gradient, masked_logits, mlm_logits
from .streams import Streams
from .typing import Choice

__all__ = ('Kind', 'DEFAULT_LAMBDA', 'FisherDiagonal', 'RehearsalBuffer',
           'SourceSampler', 'StrategyConfig', 'StepOutcome', 'l2_penalty',
           'ewc_penalty', 'penalty_and_gradient', 'estimate_fisher_diagonal',
           'rehearsal_loss', 'distillation_loss', 'gem_project',
           'strategy_step')

logger = getLogger(__name__)


class Kind(Choice):
	SDT = 'sdt'
	RH  = 'rh'
	L2  = 'l2'
	EWC = 'ewc'
	GEM = 'gem'
	DIS = 'dis'


DEFAULT_LAMBDA = {
	Kind.SDT: 0.0,
	Kind.RH:  0.1,
	Kind.L2:  1.0,
	Kind.EWC: 1e4,
	Kind.GEM: 0.0,
	Kind.DIS: 0.1,
}


def _values(vector) -> np.ndarray:
	return np.asarray(getattr(vector, 'values', vector))


class FisherDiagonal(object):
	__slots__ = ('values', 'n_batches_used', 'source_seed')

	def __init__(self, values, n_batches_used: int = 0,
	             source_seed: int = 0) -> None:
		values = np.array(values, dtype=np.float32)
		if values.ndim != 1 or not np.isfinite(values).all():
			raise CLTuneConfigError('fisher values must be a finite vector')
		if (values < 0).any():
			raise CLTuneConfigError('negative fisher entry')
		values.setflags(write=False)
		self.values         = values
		self.n_batches_used = n_batches_used
		self.source_seed    = source_seed

	def __len__(self) -> int:
		return self.values.shape[0]

	def group_means(self, groups) -> dict:
		return {name: float(self.values[mask].astype(np.float64).mean())
		        for name, mask in groups.items()}


class RehearsalBuffer(object):
	"""Source rows drawn once and then cycled through in order."""

	__slots__ = ('rows', 'cursor')

	def __init__(self, rows) -> None:
		rows = np.array(rows, dtype=np.int64)
		if rows.ndim != 2 or not rows.shape[0]:
			raise CLTuneConfigError('empty rehearsal buffer')
		rows.setflags(write=False)
		self.rows   = rows
		self.cursor = 0

	def __len__(self) -> int:
		return self.rows.shape[0]

	@classmethod
	def sample(cls, source_rows, size: int, rng) -> 'RehearsalBuffer':
		source_rows = np.asarray(source_rows)
		size = min(size, source_rows.shape[0])
		return cls(source_rows[rng.choice(source_rows.shape[0], size=size,
		                                  replace=False)])

	def next_rows(self, batch_size: int) -> np.ndarray:
		index = (self.cursor + np.arange(batch_size)) % len(self)
		self.cursor = int(index[-1] + 1) % len(self)
		return self.rows[index]


class SourceSampler(object):
	"""Source-domain batches for the strategies that look at source data.
	   A rehearsal buffer of ``buffer_size`` rows is drawn on first use
	   unless one is given.  Rows come from the ``rehearsal-sampling``
	   stream and masks from ``masking-source``; the target-side streams
	   are never touched."""

	__slots__ = ('rows', 'streams', 'vocab_size', 'batch_size', 'buffer',
	             'buffer_size', '_order')

	def __init__(self, rows, streams: Streams, vocab_size: int,
	             batch_size: int,
	             buffer: Optional[RehearsalBuffer] = None,
	             buffer_size: int = 1024) -> None:
		self.rows        = np.asarray(rows, dtype=np.int64)
		self.streams     = streams
		self.vocab_size  = vocab_size
		self.batch_size  = batch_size
		self.buffer      = buffer
		self.buffer_size = buffer_size
		self._order: Optional[RowSampler] = None

	def _mask(self, rows):
		return mask_batch(rows, self.streams['masking-source'],
		                  self.vocab_size, 'masking-source')

	def rehearsal_batch(self):
		if self.buffer is None:
			self.buffer = RehearsalBuffer.sample(
				self.rows, self.buffer_size,
				self.streams['rehearsal-sampling'])
		return self._mask(self.buffer.next_rows(self.batch_size))

	def fresh_batch(self):
		if self._order is None:
			self._order = RowSampler(len(self.rows),
			                         self.streams['rehearsal-sampling'])
		return self._mask(self.rows[self._order.next(self.batch_size)])


class StrategyConfig(object):
	__slots__ = ('kind', 'lam', 'anchor', 'fisher', 'buffer', 'teacher')

	def __init__(self, kind: Kind, lam: Optional[float] = None,
	             anchor: Optional[ParamVector] = None,
	             fisher: Optional[FisherDiagonal] = None,
	             buffer: Optional[RehearsalBuffer] = None,
	             teacher: Optional[ParamVector] = None) -> None:
		if lam is None:
			lam = DEFAULT_LAMBDA[kind]
		if not np.isfinite(lam) or lam < 0:
			raise CLTuneConfigError('lambda must be a nonnegative number')
		if kind in (Kind.L2, Kind.EWC) and anchor is None:
			raise CLTuneConfigError('{} requires an anchor'.format(kind))
		if kind is Kind.EWC:
			if fisher is None:
				raise CLTuneConfigError('ewc requires a fisher diagonal')
			CLTuneShapeError.check('fisher', fisher.values.shape,
			                       anchor.values.shape)  # type: ignore
		if kind is Kind.DIS and teacher is None:
			raise CLTuneConfigError('dis requires a teacher')
		self.kind    = kind
		self.lam     = float(lam)
		self.anchor  = anchor
		self.fisher  = fisher
		self.buffer  = buffer
		self.teacher = teacher

	def metadata(self) -> dict:
		return {'lambda': self.lam}


class StepOutcome(object):
	__slots__ = ('update_gradient', 'target_loss', 'source_loss', 'penalty',
	             'projection_applied', 'dot')

	def __init__(self, update_gradient: np.ndarray, target_loss: float,
	             source_loss: Optional[float] = None,
	             penalty: Optional[float] = None,
	             projection_applied: Optional[bool] = None,
	             dot: Optional[float] = None) -> None:
		if not np.isfinite(update_gradient).all():
			raise CLTuneNumericalError('non-finite update gradient')
		self.update_gradient    = update_gradient
		self.target_loss        = target_loss
		self.source_loss        = source_loss
		self.penalty            = penalty
		self.projection_applied = projection_applied
		self.dot                = dot


# Penalties

def _quadratic(theta, anchor, weights, lam: float) -> float:
	theta, anchor = _values(theta), _values(anchor)
	CLTuneShapeError.check('parameter', theta.shape, anchor.shape)
	diff = theta.astype(np.float64) - anchor.astype(np.float64)
	square = diff * diff
	if weights is not None:
		square = weights.astype(np.float64) * square
	return lam / 2 * float(square.sum())


def l2_penalty(theta, anchor, lam: float = DEFAULT_LAMBDA[Kind.L2]
              ) -> float:
	return _quadratic(theta, anchor, None, lam)


def ewc_penalty(theta, anchor, fisher,
                lam: float = DEFAULT_LAMBDA[Kind.EWC]) -> float:
	weights = _values(fisher)
	if (weights < 0).any():
		raise CLTuneConfigError('negative fisher entry')
	CLTuneShapeError.check('fisher', weights.shape, _values(theta).shape)
	return _quadratic(theta, anchor, weights, lam)


def _penalty_graph(anchor: np.ndarray, weights: Optional[np.ndarray],
                   lam: float):
	def graph(tape: Tape, theta, _batch):
		diff = tape.sub(theta, tape.constant(anchor))
		square = tape.mul(diff, diff)
		if weights is not None:
			square = tape.mul(tape.constant(weights), square)
		return tape.scale(tape.sum(square), lam / 2)
	return graph


def penalty_and_gradient(theta, anchor, weights, lam: float
                        ) -> Tuple[float, np.ndarray]:
	"""The quadratic penalty and its gradient through a float64 tape."""
	theta, anchor = _values(theta), _values(anchor)
	CLTuneShapeError.check('parameter', theta.shape, anchor.shape)
	graph = _penalty_graph(anchor, None if weights is None
	                       else _values(weights), lam)
	value, tape = forward(graph, theta, None, np.float64)
	return value, backward(tape)


# Fisher

def estimate_fisher_diagonal(
	params,
	batches: Iterable,
	gradient: Optional[Callable[[object, object], np.ndarray]] = None,
	source_seed: int = 0,
) -> FisherDiagonal:
	"""Mean over ``batches`` of the squared batch-loss gradient."""
	batches = list(batches)
	if not batches:
		raise CLTuneConfigError('no batches for fisher estimate')
	if gradient is None:
		gradient = lambda p, b: loss_and_gradient(p, b)[1]
	total = None
	for batch in batches:
		g = np.asarray(gradient(params, batch), dtype=np.float64)
		total = g * g if total is None else total + g * g
	logger.debug('fisher estimated from %d batches', len(batches))
	return FisherDiagonal(total / len(batches),
	                      n_batches_used=len(batches),
	                      source_seed=source_seed)


# Losses and the projection

def rehearsal_loss(loss_t: float, loss_s: float, lam: float) -> float:
	return loss_t + lam * loss_s


def _log_softmax(logits: np.ndarray) -> np.ndarray:
	shifted = logits - logits.max(axis=-1, keepdims=True)
	return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def distillation_loss(teacher_logits, student_logits) -> float:
	teacher = np.asarray(teacher_logits, dtype=np.float64)
	student = np.asarray(student_logits, dtype=np.float64)
	CLTuneShapeError.check('logits', teacher.shape, student.shape)
	targets = np.exp(_log_softmax(teacher))
	return float(-(targets * _log_softmax(student)).sum(axis=-1).mean())


def gem_project(g_t, g_s) -> Tuple[np.ndarray, bool]:
	"""Remove from ``g_t`` its component against ``g_s``.  The result is
	   the closest vector to ``g_t`` with a nonnegative inner product
	   with ``g_s``."""
	g_t = np.asarray(g_t, dtype=np.float64)
	g_s = np.asarray(g_s, dtype=np.float64)
	CLTuneShapeError.check('gradient', g_t.shape, g_s.shape)
	dot = float(g_t @ g_s)
	norm = float(g_s @ g_s)
	if dot >= 0 or norm == 0:
		return g_t, False
	g = g_t - (dot / norm) * g_s
	# near-antiparallel inputs cancel g_t almost entirely and leave a
	# residual of rounding size against g_s
	for _ in range(3):
		residual = float(g @ g_s)
		if residual >= 0:
			break
		g = g - (residual / norm) * g_s
	return g, True


# One step

def _distillation_step(params: ParamVector, teacher: ParamVector, batch
                      ) -> Tuple[float, float, np.ndarray]:
	targets = np.exp(_log_softmax(
		masked_logits(teacher, batch).astype(np.float64)))
	tape = Tape()
	theta = tape.leaf(params.values)
	logits = mlm_logits(tape, theta, params.config, batch)
	loss = tape.soft_cross_entropy(logits, targets)
	gradient, = tape.gradients(theta, root=loss)
	logp = _log_softmax(logits.data.astype(np.float64))
	hard = float(-logp[np.arange(batch.n_masked), batch.labels].mean())
	return float(loss.data), hard, gradient


def strategy_step(config: StrategyConfig, params: ParamVector,
                  target_batch,
                  source_sampler: Optional[SourceSampler] = None
                 ) -> StepOutcome:
	"""The update direction for one domain-tuning step.  Any source
	   batch comes from ``source_sampler``, which owns the source-side
	   random streams."""
	kind = config.kind
	loss_t, g_t = loss_and_gradient(params, target_batch)
	if kind is Kind.SDT:
		return StepOutcome(g_t, loss_t)

	if kind in (Kind.L2, Kind.EWC):
		weights = config.fisher.values if kind is Kind.EWC else None  # type: ignore
		penalty, g_p = penalty_and_gradient(params, config.anchor,
		                                    weights, config.lam)
		return StepOutcome(g_t + g_p, loss_t, penalty=penalty)

	if source_sampler is None:
		raise CLTuneConfigError('{} requires source batches'.format(kind))

	if kind is Kind.RH:
		loss_s, g_s = loss_and_gradient(params,
		                                source_sampler.rehearsal_batch())
		return StepOutcome(g_t + config.lam * g_s, loss_t,
		                   source_loss=loss_s,
		                   penalty=config.lam * loss_s)

	if kind is Kind.DIS:
		distill, loss_s, g_d = _distillation_step(
			params, config.teacher, source_sampler.fresh_batch())  # type: ignore
		return StepOutcome(g_t + config.lam * g_d, loss_t,
		                   source_loss=loss_s,
		                   penalty=config.lam * distill)

	assert kind is Kind.GEM
	loss_s, g_s = loss_and_gradient(params, source_sampler.fresh_batch())
	update, applied = gem_project(g_t, g_s)
	return StepOutcome(update, loss_t, source_loss=loss_s,
	                   projection_applied=applied,
	                   dot=float(g_t.astype(np.float64) @
	                             g_s.astype(np.float64)))
