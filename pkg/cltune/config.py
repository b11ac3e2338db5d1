"""The experiment configuration and where its artifacts live."""

from json import JSONDecodeError, load
from logging import getLogger
from os import environ as os_environ, fspath, makedirs
from os.path import dirname, join
from typing import Dict, Mapping, Optional, Tuple

from .corpus import Corpora, Domain, DomainSpec, Split, TokenStream, \
                    generate_domain, pack_sequences, read_corpus, \
                    read_corpus_header
from .errors import CLTuneConfigError, CLTuneDecodeError
from .model import ModelConfig
from .probes import ProbeConfig
from .strategies import Kind
from .streams import Streams
from .trainer import TrainConfig, TuneConfig, apply_preset
from .typing import Object, digest, member, optionalmember

__all__ = ('CorpusConfig', 'FisherConfig', 'ExperimentConfig', 'Layout',
           'config_from_json', 'load_config', 'config_digest',
           'corpus_digest', 'domains', 'corpus_fields', 'corpus_tokens',
           'load_corpora')

logger = getLogger(__name__)


class CorpusConfig(Object):
	# pylint: disable=line-too-long
	alphabet_size: member[int]           = member('alphabet_size')
	concentration: optionalmember[float] = optionalmember('concentration', default=0.5)
	overlap:       optionalmember[float] = optionalmember('overlap', default=0.0)
	support:       optionalmember[int]   = optionalmember('support', default=4)
	seed:          member[int]           = member('seed')
	train_tokens:  member[int]           = member('train_tokens')
	val_tokens:    member[int]           = member('val_tokens')

	def check(self) -> 'CorpusConfig':
		if self.alphabet_size <= 0 or self.concentration <= 0:
			raise CLTuneConfigError('alphabet_size and concentration must '
			                        'be positive')
		if not 0 <= self.overlap <= 1:
			raise CLTuneConfigError('overlap outside [0, 1]')
		if self.support < 0:
			raise CLTuneConfigError('support must not be negative')
		if self.seed < 0:
			raise CLTuneConfigError('negative seed {}'.format(self.seed))
		if self.train_tokens <= 0 or self.val_tokens <= 0:
			raise CLTuneConfigError('token counts must be positive')
		return self

	def spec(self) -> DomainSpec:
		# support 0 is a dense table
		return DomainSpec.random(self.alphabet_size, self.concentration,
		                         self.seed, self.support or None)

	def tokens(self, split: Split) -> int:
		return self.train_tokens if split is Split.TRAIN else self.val_tokens


class FisherConfig(Object):
	n_batches:  optionalmember[int] = optionalmember('n_batches', default=64)
	batch_size: optionalmember[int] = optionalmember('batch_size')

	def check(self) -> 'FisherConfig':
		if self.n_batches <= 0:
			raise CLTuneConfigError('n_batches must be positive')
		if self.batch_size is not None and self.batch_size <= 0:
			raise CLTuneConfigError('fisher batch_size must be positive')
		return self


class ExperimentConfig(Object):
	# pylint: disable=line-too-long
	model:         member[ModelConfig]           = member('model')
	corpus_source: member[CorpusConfig]          = member('corpus_source')
	corpus_target: member[CorpusConfig]          = member('corpus_target')
	pretrain:      member[TrainConfig]           = member('pretrain')
	domain_tune:   member[Dict[str, TuneConfig]] = member('domain_tune')
	fisher:        optionalmember[FisherConfig]  = optionalmember('fisher', default=FisherConfig())
	probes:        optionalmember[ProbeConfig]   = optionalmember('probes', default=ProbeConfig())
	output_dir:    member[str]                   = member('output_dir')
	seeds:         member[Dict[str, int]]        = member('seeds')

	def check(self) -> 'ExperimentConfig':
		self.model.check()
		for corpus in (self.corpus_source, self.corpus_target):
			corpus.check()
			if self.model.vocab_size != corpus.alphabet_size + 4:
				raise CLTuneConfigError('vocab_size {} is not alphabet_size '
				                        '{} + 4'.format(self.model.vocab_size,
				                                        corpus.alphabet_size))
		self.pretrain.check()
		for name, section in self.domain_tune.items():
			try:
				Kind.json_to(name)
			except CLTuneDecodeError:
				raise CLTuneConfigError('unknown strategy {!r}'.format(name))
			section.check()
		self.fisher.check()
		self.probes.check()
		lengths = [self.pretrain.seq_len, self.probes.seq_len]
		lengths.extend(s.seq_len for s in self.domain_tune.values())
		if max(lengths) > self.model.max_seq_len:
			raise CLTuneConfigError('seq_len {} exceeds max_seq_len {}'
			                        .format(max(lengths),
			                                self.model.max_seq_len))
		if 'base' not in self.seeds:
			raise CLTuneConfigError('no base seed')
		if any(seed < 0 for seed in self.seeds.values()):
			raise CLTuneConfigError('negative seed')
		return self

	def tune(self, kind: Kind) -> TuneConfig:
		try:
			return self.domain_tune[kind.value]
		except KeyError:
			raise CLTuneConfigError('no domain_tune section for {}'
			                        .format(kind.value))

	def streams(self) -> Streams:
		return Streams(self.seeds)


def _apply_presets(datum: object) -> object:
	if not isinstance(datum, dict):
		return datum
	datum = dict(datum)
	if 'pretrain' in datum:
		datum['pretrain'] = apply_preset(datum['pretrain'])
	if isinstance(datum.get('domain_tune'), dict):
		datum['domain_tune'] = {name: apply_preset(section)
		                        for name, section
		                        in datum['domain_tune'].items()}
	return datum


def config_from_json(datum: object,
                     environ: Optional[Mapping[str, str]] = None
                    ) -> ExperimentConfig:
	try:
		config = ExperimentConfig.json_to(_apply_presets(datum))
	except CLTuneDecodeError as e:
		raise CLTuneConfigError(str(e))
	override = (environ or {}).get('CLTUNE_OUTPUT_DIR')
	if override:
		config = config.replace(output_dir=override)
	return config.check()


def load_config(path, environ: Optional[Mapping[str, str]] = None
               ) -> ExperimentConfig:
	"""Read and validate a JSON experiment config.  ``environ`` defaults
	   to the process environment."""
	if environ is None:
		environ = os_environ
	try:
		with open(path, 'r', encoding='utf-8') as file:
			datum = load(file)
	except (OSError, UnicodeDecodeError, JSONDecodeError) as e:
		raise CLTuneConfigError('{}: {}'.format(fspath(path), e))
	try:
		return config_from_json(datum, environ)
	except CLTuneConfigError as e:
		raise CLTuneConfigError('{}: {}'.format(fspath(path), e))


def config_digest(config: ExperimentConfig) -> str:
	datum = config.for_json()
	del datum['output_dir']
	return digest(datum)


def corpus_digest(config: ExperimentConfig) -> str:
	return digest({'corpus_source': config.corpus_source,
	               'corpus_target': config.corpus_target})


class Layout(object):
	"""Artifact paths under an output directory."""

	__slots__ = ('root',)

	def __init__(self, root) -> None:
		self.root = fspath(root)

	def corpus(self, domain: Domain, split: Split) -> str:
		return join(self.root, 'corpus',
		            '{}-{}.txt'.format(domain.value, split.value))

	def run(self, name: str) -> str:
		return join(self.root, name)

	def checkpoint(self, name: str) -> str:
		return join(self.root, name, 'checkpoint.bin')

	def metrics(self, name: str) -> str:
		return join(self.root, name, 'metrics.jsonl')

	def fisher(self) -> str:
		return join(self.root, 'fisher', 'fisher.bin')

	def report(self, name: str) -> str:
		return join(self.root, 'report', name)

	@staticmethod
	def ensure(path: str) -> str:
		makedirs(dirname(path), exist_ok=True)
		return path


def domains(config: ExperimentConfig) -> Tuple[DomainSpec, DomainSpec]:
	"""Source and target specs; the target is pulled toward the source by
	   its ``overlap``."""
	source = config.corpus_source.spec()
	target = config.corpus_target.spec()
	return source, target.blend(source, config.corpus_target.overlap)


def _corpus_config(config: ExperimentConfig, domain: Domain) -> CorpusConfig:
	return (config.corpus_source if domain is Domain.SOURCE
	        else config.corpus_target)


def corpus_fields(config: ExperimentConfig, domain: Domain, split: Split
                 ) -> Dict[str, str]:
	"""The header fields a cache file of this split must carry."""
	return {'domain': domain.value, 'split': split.value,
	        'seed': str(_corpus_config(config, domain).seed),
	        'digest': corpus_digest(config)}


def corpus_tokens(config: ExperimentConfig, domain: Domain, split: Split,
                  layout: Optional[Layout] = None) -> TokenStream:
	"""The token stream of one split, from its cache file when one with a
	   matching header exists and freshly generated otherwise."""
	section = _corpus_config(config, domain)
	if layout is not None:
		path = layout.corpus(domain, split)
		header = read_corpus_header(path)
		if header == corpus_fields(config, domain, split):
			_, tokens = read_corpus(path)
			logger.debug('using corpus cache %s', path)
			return tokens
		if header is not None:
			logger.warning('ignoring stale corpus cache %s', path)
	source, target = domains(config)
	spec = source if domain is Domain.SOURCE else target
	return generate_domain(spec, section.tokens(split), domain, split)


def load_corpora(config: ExperimentConfig, seq_len: int,
                 layout: Optional[Layout] = None) -> Corpora:
	rows = [pack_sequences(corpus_tokens(config, domain, split, layout),
	                       seq_len)
	        for domain in (Domain.SOURCE, Domain.TARGET)
	        for split in (Split.TRAIN, Split.VALIDATION)]
	return Corpora(*rows, vocab_size=config.model.vocab_size)
