"""Pretraining and domain-tuning loops.

Both loops draw target rows from the ``data-order`` stream and mask them
from the masking stream of their domain, step the optimizer on the
direction a :class:`~cltune.strategies.StepOutcome` supplies, and emit
one :class:`~cltune.metrics.MetricsRecord` per step plus one per
evaluation event.  Nothing here reads the wall clock except to fill
``wall_ms``.
"""

from logging import getLogger
from time import perf_counter
from typing import Callable, Dict, Optional, Sequence
import numpy as np

from .container import save_checkpoint
from .corpus import Corpora, Domain, MaskedBatch, RowSampler, mask_batch
from .errors import CLTuneConfigError, CLTuneMismatchError, \
                    CLTuneShapeError
from .metrics import MetricsLog, MetricsRecord, Phase
from .model import ModelConfig, ParamVector, init_params, loss_and_gradient, \
                   token_losses
from .optim import DivergenceGuard, Optimizer, OptimizerState, \
                   optimizer_step
from .strategies import Kind, SourceSampler, StepOutcome, StrategyConfig, \
                        strategy_step
from .streams import Streams, stream
from .typing import Object, member, optionalmember

__all__ = ('PRESETS', 'TrainConfig', 'TuneConfig', 'Evaluation',
           'apply_preset', 'validation_batches', 'evaluate', 'pretrain',
           'domain_tune')

logger = getLogger(__name__)

PRESETS = {
	'desk':  {'batch_size': 8, 'seq_len': 64, 'learning_rate': 3e-4,
	          'optimizer': 'adam', 'warmup_steps': 100},
	'paper': {'batch_size': 8, 'seq_len': 512, 'learning_rate': 5e-5,
	          'optimizer': 'adam', 'warmup_steps': 10000},
}

_EVAL_ROWS = 64


def apply_preset(section: object) -> object:
	"""Fill keys absent from a train section from its named preset."""
	if not isinstance(section, dict) or 'preset' not in section:
		return section
	try:
		preset = PRESETS[section['preset']]
	except (KeyError, TypeError):
		raise CLTuneConfigError('unknown preset {!r}'
		                        .format(section['preset']))
	merged = dict(preset)
	merged.update(section)
	return merged


class TrainConfig(Object):
	# pylint: disable=line-too-long
	preset:           optionalmember[str]   = optionalmember('preset')
	steps:            member[int]           = member('steps')
	batch_size:       member[int]           = member('batch_size')
	seq_len:          member[int]           = member('seq_len')
	optimizer:        member[Optimizer]     = member('optimizer')
	learning_rate:    member[float]         = member('learning_rate')
	warmup_steps:     optionalmember[int]   = optionalmember('warmup_steps', default=0)
	eval_every:       member[int]           = member('eval_every')
	checkpoint_every: optionalmember[int]   = optionalmember('checkpoint_every', default=0)
	eval_subsets:     optionalmember[int]   = optionalmember('eval_subsets', default=5)
	eval_fraction:    optionalmember[float] = optionalmember('eval_fraction', default=0.5)
	corrupt:          optionalmember[bool]  = optionalmember('corrupt', default=True)

	def check(self) -> 'TrainConfig':
		if self.steps <= 0:
			raise CLTuneConfigError('steps must be positive')
		if not 0 < self.eval_every <= self.steps:
			raise CLTuneConfigError('eval_every must lie in [1, steps]')
		if not self.learning_rate > 0:
			raise CLTuneConfigError('learning_rate must be positive')
		if self.batch_size <= 0 or self.seq_len <= 0:
			raise CLTuneConfigError('batch_size and seq_len must be '
			                        'positive')
		if self.warmup_steps < 0 or self.checkpoint_every < 0:
			raise CLTuneConfigError('warmup_steps and checkpoint_every '
			                        'must not be negative')
		if self.eval_subsets <= 0:
			raise CLTuneConfigError('eval_subsets must be positive')
		if not 0 < self.eval_fraction <= 1:
			raise CLTuneConfigError('fraction outside (0, 1]')
		return self


class TuneConfig(TrainConfig):
	# pylint: disable=line-too-long
	lambda_:           optionalmember[float] = optionalmember('lambda')
	buffer_size:       optionalmember[int]   = optionalmember('buffer_size', default=1024)
	source_batch_size: optionalmember[int]   = optionalmember('source_batch_size')

	def check(self) -> 'TuneConfig':
		super().check()
		if self.lambda_ is not None and self.lambda_ < 0:
			raise CLTuneConfigError('lambda must not be negative')
		if self.buffer_size <= 0:
			raise CLTuneConfigError('buffer_size must be positive')
		if (self.source_batch_size is not None and
		    self.source_batch_size <= 0):
			raise CLTuneConfigError('source_batch_size must be positive')
		return self


class Evaluation(object):
	__slots__ = ('mean', 'subsets')

	def __init__(self, mean: float, subsets: Sequence[float]) -> None:
		self.mean    = mean
		self.subsets = tuple(subsets)

	def __repr__(self) -> str:
		return 'Evaluation({!r}, {!r})'.format(self.mean, self.subsets)


def validation_batches(data: Corpora, streams: Streams,
                       corrupt: bool = True) -> Dict[str, MaskedBatch]:
	"""Both validation splits, masked once from dedicated streams so that
	   every eval event of every run sees the same masks."""
	batches = {}
	for domain, name in ((Domain.SOURCE, 'source'),
	                     (Domain.TARGET, 'target')):
		rows = data.validation(domain)
		if len(rows):
			stream_id = 'validation-{}'.format(name)
			batches[name] = mask_batch(rows, streams.fresh(stream_id),
			                           data.vocab_size, stream_id, corrupt)
	return batches


def evaluate(params: ParamVector, split: MaskedBatch, n_subsets: int = 5,
             fraction: float = 0.5, rng=None) -> Evaluation:
	"""Mean masked-token loss over ``n_subsets`` random subsets of the
	   rows of ``split``, each holding ``fraction`` of them."""
	if not 0 < fraction <= 1:
		raise CLTuneConfigError('fraction outside (0, 1]')
	if n_subsets <= 0:
		raise CLTuneConfigError('n_subsets must be positive')
	count = len(split)
	if not count or not split.n_masked:
		raise CLTuneConfigError('empty validation split')
	if rng is None:
		rng = stream(0, 'eval')

	sums = np.zeros(count, dtype=np.float64)
	sizes = np.zeros(count, dtype=np.float64)
	for start in range(0, count, _EVAL_ROWS):
		chunk = np.arange(start, min(start + _EVAL_ROWS, count))
		part = split.select(chunk)
		losses = token_losses(params, part)
		np.add.at(sums, chunk[part.rows], losses)
		np.add.at(sizes, chunk[part.rows], 1)

	size = max(1, int(round(fraction * count)))
	values = []
	for _ in range(n_subsets):
		if size < count:
			chosen = rng.choice(count, size=size, replace=False)
		else:
			chosen = np.arange(count)
		values.append(float(sums[chosen].sum() / sizes[chosen].sum()))
	return Evaluation(float(np.mean(values)), values)


class _Run(object):
	"""The parts shared by pretraining and domain-tuning."""

	__slots__ = ('config', 'phase', 'label', 'streams', 'log', 'digest',
	             'checkpoint', 'validation', 'lam', 'metadata', '_clock')

	def __init__(self, config: TrainConfig, phase: Phase, label: str,
	             streams: Streams, log: Optional[MetricsLog],
	             digest: str, checkpoint, validation: Dict[str, MaskedBatch],
	             lam: Optional[float] = None,
	             metadata: Optional[dict] = None) -> None:
		self.config     = config
		self.phase      = phase
		self.label      = label
		self.streams    = streams
		self.log        = log if log is not None else MetricsLog()
		self.digest     = digest
		self.checkpoint = checkpoint
		self.validation = validation
		self.lam        = lam
		self.metadata   = dict(metadata or {})
		self._clock     = perf_counter()

	def _elapsed(self) -> float:
		now = perf_counter()
		elapsed, self._clock = (now - self._clock) * 1000, now
		return round(elapsed, 3)

	def _record(self, step: int, **fields) -> MetricsRecord:
		record = MetricsRecord(step=step, phase=self.phase,
		                       strategy=self.label,
		                       seed=self.streams.base,
		                       wall_ms=self._elapsed(),
		                       digest=self.digest, **fields)
		self.log.append(record)
		return record

	def evaluate(self, params: ParamVector, step: int) -> None:
		if not self.validation:
			return
		rng = stream(self.streams.seed('eval'), 'eval-{}'.format(step))
		losses = {}
		for name in sorted(self.validation):
			result = evaluate(params, self.validation[name],
			                  self.config.eval_subsets,
			                  self.config.eval_fraction, rng)
			losses[name] = result.mean
		logger.info('%s step %d: %s', self.label, step,
		            ', '.join('{} {:.4f}'.format(k, v)
		                      for k, v in losses.items()))
		self._record(step, eval_losses=losses)

	def save(self, params: ParamVector, step: int) -> None:
		if self.checkpoint is None:
			return
		metadata = dict(self.metadata, phase=self.phase.value, step=step)
		save_checkpoint(self.checkpoint, params, self.digest, metadata)

	def run(self, params: ParamVector,
	        step_fn: Callable[[ParamVector, int], StepOutcome]
	       ) -> ParamVector:
		config = self.config
		state = OptimizerState(config.optimizer, len(params))
		guard = DivergenceGuard()
		self.evaluate(params, 0)
		for step in range(1, config.steps + 1):
			outcome = step_fn(params, step)
			guard.update(outcome.target_loss, step)
			params = params.replace(optimizer_step(
				params, outcome.update_gradient, state, config))
			self._record(step,
			             target_loss=outcome.target_loss,
			             source_loss=outcome.source_loss,
			             penalty=outcome.penalty,
			             gem_flag=outcome.projection_applied,
			             gem_dot=outcome.dot,
			             lambda_=self.lam)
			logger.debug('%s step %d: loss %.4f', self.label, step,
			             outcome.target_loss)
			if step % config.eval_every == 0 or step == config.steps:
				self.evaluate(params, step)
			if (config.checkpoint_every and
			    step % config.checkpoint_every == 0 and
			    step != config.steps):
				self.save(params, step)
		self.save(params, config.steps)
		return params


def _check_rows(rows: np.ndarray, config: TrainConfig, what: str) -> None:
	if not len(rows):
		raise CLTuneConfigError('no {} rows'.format(what))
	CLTuneShapeError.check(what + ' row', rows.shape[1:], (config.seq_len,))


def pretrain(config: TrainConfig, model_config: ModelConfig, data: Corpora,
             streams: Streams, log: Optional[MetricsLog] = None,
             checkpoint=None, digest: str = '') -> ParamVector:
	"""Train a freshly initialized model on the source domain."""
	config.check()
	_check_rows(data.source_train, config, 'source')
	params = init_params(model_config)
	order = RowSampler(len(data.source_train), streams['data-order'])

	def step(params: ParamVector, _step: int) -> StepOutcome:
		rows = data.source_train[order.next(config.batch_size)]
		batch = mask_batch(rows, streams['masking-source'],
		                   data.vocab_size, 'masking-source',
		                   config.corrupt)
		loss, gradient = loss_and_gradient(params, batch)
		return StepOutcome(gradient, loss)

	run = _Run(config, Phase.PRETRAIN, 'ndt', streams, log, digest,
	           checkpoint, validation_batches(data, streams, config.corrupt))
	logger.info('pretraining %d parameters for %d steps', len(params),
	            config.steps)
	return run.run(params, step)


def domain_tune(config: TuneConfig, init: ParamVector, data: Corpora,
                streams: Streams, strategy: StrategyConfig,
                log: Optional[MetricsLog] = None, checkpoint=None,
                digest: str = '',
                model_config: Optional[ModelConfig] = None) -> ParamVector:
	"""Continue training ``init`` on the target domain under
	   ``strategy``."""
	config.check()
	_check_rows(data.target_train, config, 'target')
	if model_config is not None and init.config_hash != model_config.digest():
		raise CLTuneMismatchError('initial checkpoint does not match the '
		                          'model config')
	for other, what in ((strategy.anchor, 'anchor'),
	                    (strategy.teacher, 'teacher')):
		if other is not None:
			init.check_compatible(other, what)
	if strategy.fisher is not None:
		CLTuneShapeError.check('fisher', strategy.fisher.values.shape,
		                       init.values.shape)

	source = None
	if strategy.kind in (Kind.RH, Kind.GEM, Kind.DIS):
		_check_rows(data.source_train, config, 'source')
		source = SourceSampler(data.source_train, streams, data.vocab_size,
		                       config.source_batch_size or config.batch_size,
		                       strategy.buffer, config.buffer_size)
	order = RowSampler(len(data.target_train), streams['data-order'])

	def step(params: ParamVector, _step: int) -> StepOutcome:
		rows = data.target_train[order.next(config.batch_size)]
		batch = mask_batch(rows, streams['masking-target'],
		                   data.vocab_size, 'masking-target',
		                   config.corrupt)
		return strategy_step(strategy, params, batch, source)

	lam = None if strategy.kind is Kind.SDT else strategy.lam
	run = _Run(config, Phase.DOMAIN_TUNE, strategy.kind.value, streams, log,
	           digest, checkpoint,
	           validation_batches(data, streams, config.corrupt),
	           lam=lam, metadata=strategy.metadata())
	logger.info('domain-tuning with %s (lambda %g) for %d steps',
	            strategy.kind.value, strategy.lam, config.steps)
	return run.run(init, step)
