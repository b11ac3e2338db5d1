from typing import Dict, Mapping, Optional
from zlib import crc32
from numpy.random import Generator, PCG64, SeedSequence
from .errors import CLTuneConfigError

__all__ = ('STREAMS', 'stream', 'Streams')

STREAMS = ('data-order', 'masking-source', 'masking-target',
           'rehearsal-sampling', 'init')


def stream(seed: int, name: str) -> Generator:
	"""A generator for the stream called ``name`` under ``seed``.  Streams
	   with different names never share state, so drawing from one leaves
	   every other stream's output unchanged."""
	if seed < 0:
		raise CLTuneConfigError('negative seed {}'.format(seed))
	key = crc32(name.encode('utf-8'))
	return Generator(PCG64(SeedSequence(seed, spawn_key=(key,))))


class Streams(object):
	"""Named generators for one run.  ``seeds`` must hold ``base``; any
	   other key overrides the seed of the stream of that name."""

	__slots__ = ('seeds', '_live')

	def __init__(self, seeds: Mapping[str, int]) -> None:
		if 'base' not in seeds:
			raise CLTuneConfigError('no base seed')
		self.seeds: Dict[str, int] = dict(seeds)
		self._live: Dict[str, Generator] = {}

	@property
	def base(self) -> int:
		return self.seeds['base']

	def seed(self, name: str) -> int:
		return self.seeds.get(name, self.base)

	def __getitem__(self, name: str) -> Generator:
		try:
			return self._live[name]
		except KeyError:
			rng = self._live[name] = self.fresh(name)
			return rng

	def fresh(self, name: str, seed: Optional[int] = None) -> Generator:
		return stream(self.seed(name) if seed is None else seed, name)
