"""Downstream probes on synthetic sequence classification.

A probe task labels each row by whether a designated token occurs more
often than a threshold.  Source and target variants of a task share that
rule and differ only in the domain their rows come from, which is what
the zero-shot shift evaluation relies on.
"""

from logging import getLogger
from math import sqrt
from typing import List, Optional, Tuple
import numpy as np

from . import NSPECIAL
from .autodiff import Tape, Tensor
from .corpus import Domain, DomainSpec, RowSampler, sample_rows, unmasked
from .errors import CLTuneConfigError, CLTuneMismatchError, \
                    CLTuneNumericalError
from .model import ParamVector, hidden_representations, pooled_output
from .optim import DivergenceGuard, Optimizer, OptimizerState, \
                   optimizer_step
from .streams import stream
from .typing import Object, optionalmember

__all__ = ('ProbeConfig', 'LabelRule', 'ProbeTask', 'ProbeHead',
           'ProbeResult', 'MIEstimate', 'make_probe_task', 'train_head',
           'final_features', 'finetune_probe', 'domain_shift_eval',
           'mi_estimate', 'mi_gap_features', 'mi_gap')

logger = getLogger(__name__)

_RULE_ATTEMPTS = 10
_BALANCED      = 0.4
_DEGENERATE    = 0.2


class ProbeConfig(Object):
	# pylint: disable=line-too-long
	n_examples:            optionalmember[int]   = optionalmember('n_examples', default=2000)
	test_fraction:         optionalmember[float] = optionalmember('test_fraction', default=0.5)
	seq_len:               optionalmember[int]   = optionalmember('seq_len', default=64)
	hidden:                optionalmember[int]   = optionalmember('hidden', default=64)
	steps:                 optionalmember[int]   = optionalmember('steps', default=500)
	optimizer:             optionalmember[Optimizer] = optionalmember('optimizer', default=Optimizer.ADAM)
	learning_rate:         optionalmember[float] = optionalmember('learning_rate', default=1e-2)
	warmup_steps:          optionalmember[int]   = optionalmember('warmup_steps', default=0)
	batch_size:            optionalmember[int]   = optionalmember('batch_size', default=0)
	train_encoder:         optionalmember[bool]  = optionalmember('train_encoder', default=False)
	encoder_learning_rate: optionalmember[float] = optionalmember('encoder_learning_rate', default=1e-4)
	encoder_batch_size:    optionalmember[int]   = optionalmember('encoder_batch_size', default=32)
	train_fractions:       optionalmember[List[float]] = optionalmember('train_fractions', default=(1.0,))
	seed:                  optionalmember[int]   = optionalmember('seed', default=0)

	def check(self) -> 'ProbeConfig':
		if self.n_examples < 100:
			raise CLTuneConfigError('probe tasks need at least 100 '
			                        'examples')
		if not 0 < self.test_fraction < 1:
			raise CLTuneConfigError('test_fraction outside (0, 1)')
		if min(self.seq_len, self.hidden, self.steps) <= 0:
			raise CLTuneConfigError('seq_len, hidden and steps must be '
			                        'positive')
		if self.learning_rate <= 0 or self.encoder_learning_rate <= 0:
			raise CLTuneConfigError('learning rates must be positive')
		if self.batch_size < 0 or self.encoder_batch_size <= 0:
			raise CLTuneConfigError('invalid probe batch size')
		if not self.train_fractions or \
		   not all(0 < f <= 1 for f in self.train_fractions):
			raise CLTuneConfigError('train fraction outside (0, 1]')
		return self


class LabelRule(object):
	"""label = count(token) > threshold.

	   Task construction takes the threshold from the median count and
	   one below it, whichever splits the rows more evenly."""

	__slots__ = ('token', 'threshold')

	def __init__(self, token: int, threshold: int) -> None:
		self.token     = token
		self.threshold = threshold

	def __repr__(self) -> str:
		return 'LabelRule({!r}, {!r})'.format(self.token, self.threshold)

	def __eq__(self, other):
		if not isinstance(other, LabelRule):
			return NotImplemented
		return (self.token, self.threshold) == (other.token, other.threshold)

	def __hash__(self):
		return hash((self.token, self.threshold))

	def counts(self, rows) -> np.ndarray:
		return (np.asarray(rows) == self.token).sum(axis=1)

	def apply(self, rows) -> np.ndarray:
		return (self.counts(rows) > self.threshold).astype(np.int64)


def _minority(labels: np.ndarray) -> float:
	share = float(labels.mean()) if labels.size else 0.0
	return min(share, 1 - share)


def _choose_rule(rows: np.ndarray, alphabet_size: int, rng) -> LabelRule:
	best: Optional[LabelRule] = None
	best_minority = -1.0
	for _ in range(_RULE_ATTEMPTS):
		token = NSPECIAL + int(rng.integers(alphabet_size))
		counts = (rows == token).sum(axis=1)
		median = int(np.floor(np.median(counts)))
		for threshold in (median - 1, median):
			minority = _minority((counts > threshold).astype(np.int64))
			if minority > best_minority:
				best, best_minority = LabelRule(token, threshold), minority
		if best_minority >= _BALANCED:
			break
	if best is None or best_minority < _DEGENERATE:
		raise CLTuneNumericalError('degenerate probe labels after {} '
		                           'attempts'.format(_RULE_ATTEMPTS))
	return best


class ProbeTask(object):
	__slots__ = ('domain', 'rule', 'train_rows', 'train_labels', 'test_rows',
	             'test_labels', 'seed')

	def __init__(self, domain: Domain, rule: LabelRule, train_rows,
	             train_labels, test_rows, test_labels, seed: int) -> None:
		self.domain       = domain
		self.rule         = rule
		self.train_rows   = np.asarray(train_rows)
		self.train_labels = np.asarray(train_labels)
		self.test_rows    = np.asarray(test_rows)
		self.test_labels  = np.asarray(test_labels)
		self.seed         = seed


def make_probe_task(spec: DomainSpec, kind: Domain, n_examples: int,
                    seed: int, seq_len: int = 64,
                    rule: Optional[LabelRule] = None,
                    test_fraction: float = 0.5) -> ProbeTask:
	"""Sample ``n_examples`` rows of the domain and label them.  Without a
	   ``rule`` one is chosen so the classes come out balanced; a given
	   rule is reused unchanged."""
	if n_examples < 100:
		raise CLTuneConfigError('probe tasks need at least 100 examples')
	rows = sample_rows(spec, n_examples, seq_len,
	                   stream(seed, 'probe-rows-{}'.format(kind.value)))
	if rule is None:
		rule = _choose_rule(rows, spec.alphabet_size,
		                    stream(seed, 'probe-rule'))
	labels = rule.apply(rows)
	if _minority(labels) == 0:
		raise CLTuneNumericalError('probe labels have a single class')
	order = stream(seed, 'probe-split-{}'.format(kind.value)) \
	        .permutation(n_examples)
	n_test = int(round(n_examples * test_fraction))
	test, train = order[:n_test], order[n_test:]
	logger.debug('probe task %s: token %d above %d, %.3f positive',
	             kind.value, rule.token, rule.threshold, labels.mean())
	return ProbeTask(kind, rule, rows[train], labels[train], rows[test],
	                 labels[test], seed)


# Heads

class ProbeHead(object):
	"""A two-layer tanh classifier over fixed-size features."""

	__slots__ = ('values', 'n_inputs', 'hidden', 'n_classes')

	def __init__(self, values, n_inputs: int, hidden: int,
	             n_classes: int) -> None:
		values = np.array(values, dtype=np.float32)
		expected = (n_inputs + 1) * hidden + (hidden + 1) * n_classes
		if values.shape != (expected,):
			raise CLTuneConfigError('probe head size mismatch')
		self.values    = values
		self.n_inputs  = n_inputs
		self.hidden    = hidden
		self.n_classes = n_classes

	@classmethod
	def init(cls, n_inputs: int, hidden: int, n_classes: int, rng
	        ) -> 'ProbeHead':
		w1 = rng.uniform(-1, 1, size=(n_inputs, hidden)) / sqrt(n_inputs)
		w2 = rng.uniform(-1, 1, size=(hidden, n_classes)) / sqrt(hidden)
		return cls(np.concatenate([w1.ravel(), np.zeros(hidden),
		                           w2.ravel(), np.zeros(n_classes)]),
		           n_inputs, hidden, n_classes)

	def graph(self, tape: Tape, theta: Tensor, features: Tensor) -> Tensor:
		n, h, k = self.n_inputs, self.hidden, self.n_classes
		cut = np.cumsum([0, n * h, h, h * k, k])
		w1 = tape.slice(theta, cut[0], cut[1], (n, h))
		b1 = tape.slice(theta, cut[1], cut[2], (h,))
		w2 = tape.slice(theta, cut[2], cut[3], (h, k))
		b2 = tape.slice(theta, cut[3], cut[4], (k,))
		return tape.dense(tape.tanh(tape.dense(features, w1, b1)), w2, b2)

	def log_proba(self, features) -> np.ndarray:
		tape = Tape()
		logits = self.graph(tape, tape.leaf(self.values),
		                    tape.constant(features)).data.astype(np.float64)
		shifted = logits - logits.max(axis=-1, keepdims=True)
		return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

	def predict(self, features) -> np.ndarray:
		return self.log_proba(features).argmax(axis=-1)

	def accuracy(self, features, labels) -> float:
		return float((self.predict(features) == np.asarray(labels)).mean())

	def log_likelihood(self, features, labels) -> float:
		logp = self.log_proba(features)
		return float(logp[np.arange(len(labels)), labels].mean())


def _batches(count: int, batch_size: int, rng):
	if not batch_size or batch_size >= count:
		while True:
			yield np.arange(count)
	order = RowSampler(count, rng)
	while True:
		yield order.next(batch_size)


def train_head(features, labels, config: ProbeConfig, seed: int,
               n_classes: int = 2) -> ProbeHead:
	features = np.asarray(features, dtype=np.float32)
	labels = np.asarray(labels, dtype=np.int64)
	head = ProbeHead.init(features.shape[1], config.hidden, n_classes,
	                      stream(seed, 'probe-head'))
	state = OptimizerState(config.optimizer, len(head.values))
	guard = DivergenceGuard()
	theta = head.values
	batches = _batches(len(labels), config.batch_size,
	                   stream(seed, 'probe-order'))
	for step in range(1, config.steps + 1):
		index = next(batches)
		tape = Tape()
		leaf = tape.leaf(theta)
		logits = head.graph(tape, leaf, tape.constant(features[index]))
		loss = tape.cross_entropy(logits, labels[index])
		gradient, = tape.gradients(leaf, root=loss)
		guard.update(float(loss.data), step)
		theta = optimizer_step(theta, gradient, state, config)
	return ProbeHead(theta, head.n_inputs, head.hidden, n_classes)


# Downstream probes

def final_features(params: ParamVector, rows) -> np.ndarray:
	"""Mean-pooled final hidden state per row."""
	d = params.config.d_model
	return hidden_representations(params, unmasked(rows))[:, -d:]


class ProbeResult(object):
	__slots__ = ('head', 'encoder', 'rule', 'accuracy', 'train_fraction',
	             'n_test')

	def __init__(self, head: ProbeHead, encoder: ParamVector,
	             rule: LabelRule, accuracy: float, train_fraction: float,
	             n_test: int) -> None:
		self.head           = head
		self.encoder        = encoder
		self.rule           = rule
		self.accuracy       = accuracy
		self.train_fraction = train_fraction
		self.n_test         = n_test

	def score(self, rows, labels) -> float:
		return self.head.accuracy(final_features(self.encoder, rows), labels)


def _finetune_encoder(params: ParamVector, rows, labels,
                      config: ProbeConfig, seed: int
                     ) -> Tuple[ParamVector, ProbeHead]:
	model = params.config
	head = ProbeHead.init(model.d_model, config.hidden, 2,
	                      stream(seed, 'probe-head'))
	head_state = OptimizerState(config.optimizer, len(head.values))
	encoder_state = OptimizerState(config.optimizer, len(params))
	encoder_config = config.replace(learning_rate=config.encoder_learning_rate)
	guard = DivergenceGuard()
	batches = _batches(len(labels), config.encoder_batch_size,
	                   stream(seed, 'probe-order'))
	encoder, theta = params.values, head.values
	for step in range(1, config.steps + 1):
		index = next(batches)
		tape = Tape()
		enc_leaf, head_leaf = tape.leaf(encoder), tape.leaf(theta)
		pooled = pooled_output(tape, enc_leaf, model, unmasked(rows[index]))
		loss = tape.cross_entropy(head.graph(tape, head_leaf, pooled),
		                          labels[index])
		g_enc, g_head = tape.gradients(enc_leaf, head_leaf, root=loss)
		guard.update(float(loss.data), step)
		encoder = optimizer_step(encoder, g_enc, encoder_state,
		                         encoder_config)
		theta = optimizer_step(theta, g_head, head_state, config)
	return (params.replace(encoder),
	        ProbeHead(theta, head.n_inputs, head.hidden, 2))


def finetune_probe(params: ParamVector, task: ProbeTask, config: ProbeConfig,
                   train_fraction: float = 1.0) -> ProbeResult:
	"""Train a head (and with ``train_encoder`` the encoder too) on the
	   first ``train_fraction`` of the task's training rows and report
	   test accuracy."""
	if not 0 < train_fraction <= 1:
		raise CLTuneConfigError('train fraction outside (0, 1]')
	count = max(1, int(round(train_fraction * len(task.train_rows))))
	rows, labels = task.train_rows[:count], task.train_labels[:count]
	if config.train_encoder:
		encoder, head = _finetune_encoder(params, rows, labels, config,
		                                  task.seed)
	else:
		encoder = params
		head = train_head(final_features(params, rows), labels, config,
		                  task.seed)
	result = ProbeResult(head, encoder, task.rule, 0.0, train_fraction,
	                     len(task.test_labels))
	result.accuracy = result.score(task.test_rows, task.test_labels)
	logger.info('probe on %s rows (fraction %g): accuracy %.4f',
	            task.domain.value, train_fraction, result.accuracy)
	return result


def domain_shift_eval(result: ProbeResult, task: ProbeTask) -> float:
	"""Zero-shot accuracy of a finetuned probe on another task variant."""
	if task.rule != result.rule:
		raise CLTuneMismatchError('label rule mismatch: {!r} vs {!r}'
		                          .format(result.rule, task.rule))
	return result.score(task.test_rows, task.test_labels)


# Mutual information

class MIEstimate(object):
	"""Held-out mean log-likelihood of a probe, in nats.  It is at most
	   zero; the difference of two on the same labels estimates the
	   difference of their mutual informations with the labels."""

	__slots__ = ('value', 'n_test')

	def __init__(self, value: float, n_test: int) -> None:
		self.value  = value
		self.n_test = n_test

	def __repr__(self) -> str:
		return 'MIEstimate({!r}, {!r})'.format(self.value, self.n_test)


def mi_estimate(train_features, train_labels, test_features, test_labels,
                config: ProbeConfig, seed: int) -> MIEstimate:
	head = train_head(train_features, train_labels, config, seed)
	value = head.log_likelihood(np.asarray(test_features, dtype=np.float32),
	                            np.asarray(test_labels))
	return MIEstimate(value, len(test_labels))


def mi_gap_features(features_a: Tuple[np.ndarray, np.ndarray],
                    features_b: Tuple[np.ndarray, np.ndarray],
                    train_labels, test_labels, config: ProbeConfig,
                    seed: int) -> float:
	"""The gap between two representations given as (train, test)
	   feature pairs.  Both probes train from the same seed."""
	a = mi_estimate(features_a[0], train_labels, features_a[1], test_labels,
	                config, seed)
	b = mi_estimate(features_b[0], train_labels, features_b[1], test_labels,
	                config, seed)
	return a.value - b.value


def mi_gap(params_a: ParamVector, params_b: ParamVector, task: ProbeTask,
           config: ProbeConfig) -> float:
	params_a.check_compatible(params_b, 'compared model')

	def features(params):
		return (hidden_representations(params, unmasked(task.train_rows)),
		        hidden_representations(params, unmasked(task.test_rows)))

	gap = mi_gap_features(features(params_a), features(params_b),
	                      task.train_labels, task.test_labels, config,
	                      task.seed)
	logger.info('mutual information gap %.4f nats', gap)
	return gap
