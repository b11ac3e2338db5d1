from logging import getLogger
from typing import Optional
import numpy as np

from .errors import CLTuneNumericalError, CLTuneShapeError
from .typing import Choice

__all__ = ('Optimizer', 'OptimizerState', 'DivergenceGuard', 'learning_rate',
           'optimizer_step')

logger = getLogger(__name__)

BETA1   = 0.9
BETA2   = 0.999
EPSILON = 1e-8


class Optimizer(Choice):
	SGD  = 'sgd'
	ADAM = 'adam'


class OptimizerState(object):
	__slots__ = ('kind', 'step', 'first', 'second')

	def __init__(self, kind: Optimizer, size: int) -> None:
		self.kind = kind
		self.step = 0
		self.first:  Optional[np.ndarray] = None
		self.second: Optional[np.ndarray] = None
		if kind is Optimizer.ADAM:
			self.first  = np.zeros(size, dtype=np.float64)
			self.second = np.zeros(size, dtype=np.float64)


def learning_rate(config, step: int) -> float:
	"""Linear warmup over ``warmup_steps``, then constant.  Steps count
	   from one."""
	if config.warmup_steps > 0:
		return config.learning_rate * min(1.0, step / config.warmup_steps)
	return config.learning_rate


def optimizer_step(params, gradient, state: OptimizerState, config
                  ) -> np.ndarray:
	"""Apply one update to a float32 parameter array.  ``config`` needs
	   ``learning_rate`` and ``warmup_steps``."""
	theta = np.asarray(getattr(params, 'values', params))
	gradient = np.asarray(gradient, dtype=np.float64)
	CLTuneShapeError.check('gradient', gradient.shape, theta.shape)
	state.step += 1
	rate = learning_rate(config, state.step)
	if state.kind is Optimizer.SGD:
		delta = rate * gradient
	else:
		first, second = state.first, state.second
		assert first is not None and second is not None
		first *= BETA1
		first += (1 - BETA1) * gradient
		second *= BETA2
		second += (1 - BETA2) * gradient * gradient
		unbiased1 = first / (1 - BETA1 ** state.step)
		unbiased2 = second / (1 - BETA2 ** state.step)
		delta = rate * unbiased1 / (np.sqrt(unbiased2) + EPSILON)
	updated = (theta.astype(np.float64) - delta).astype(np.float32)
	if not np.isfinite(updated).all():
		raise CLTuneNumericalError('non-finite parameter update at step {}'
		                           .format(state.step),
		                           index=state.step,
		                           operation=state.kind.value)
	return updated


class DivergenceGuard(object):
	"""Abort once the loss has stayed above ``factor`` times the first
	   loss seen for ``patience`` consecutive steps."""

	__slots__ = ('factor', 'patience', 'initial', 'streak')

	def __init__(self, factor: float = 10.0, patience: int = 100) -> None:
		self.factor   = factor
		self.patience = patience
		self.initial: Optional[float] = None
		self.streak   = 0

	def update(self, loss: float, step: int) -> None:
		if self.initial is None:
			self.initial = loss
			return
		# NaN counts as above
		if not loss <= self.factor * self.initial:
			self.streak += 1
		else:
			self.streak = 0
		if self.streak >= self.patience:
			raise CLTuneNumericalError('diverged at step {}: loss {:.4g} '
			                           'above {:g}x initial {:.4g} for {} '
			                           'steps'.format(step, loss,
			                                          self.factor,
			                                          self.initial,
			                                          self.patience),
			                           index=step, operation='divergence')
