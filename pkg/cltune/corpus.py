"""Synthetic domains, sequence packing and masked-token batches.

A domain is an order-2 Markov source over an alphabet of ``alphabet_size``
symbols; symbol ``a`` is token id ``a + NSPECIAL`` so streams never
contain the reserved ids.
"""

from bisect import bisect_right
from logging import getLogger
from os import fspath, replace
from typing import Dict, List, Optional, Tuple, Union
import numpy as np

from . import MASK, NSPECIAL, PAD
from .errors import CLTuneConfigError, CLTuneDecodeError, CLTuneMissingError
from .streams import stream
from .typing import Choice

__all__ = ('Domain', 'Split', 'DomainSpec', 'TokenStream', 'MaskedBatch',
           'RowSampler', 'Corpora', 'generate_domain', 'sample_tokens',
           'sample_rows', 'pack_sequences', 'mask_batch', 'unmasked',
           'corpus_header', 'write_corpus', 'read_corpus_header',
           'read_corpus')

logger = getLogger(__name__)

MASK_PERCENT = 15


class Domain(Choice):
	SOURCE = 's'
	TARGET = 't'


class Split(Choice):
	TRAIN      = 'train'
	VALIDATION = 'val'


class DomainSpec(object):
	__slots__ = ('transition_table', 'overlap', 'seed')

	def __init__(self, transition_table, overlap: float = 0.0,
	             seed: int = 0) -> None:
		table = np.array(transition_table, dtype=np.float64)
		if (table.ndim != 3 or not table.shape[0] ==
		    table.shape[1] == table.shape[2] or not table.size or
		    not np.isfinite(table).all() or (table < 0).any() or
		    (np.abs(table.sum(axis=-1) - 1) > 1e-9).any()):
			raise CLTuneConfigError('invalid probability table')
		if not 0 <= overlap <= 1:
			raise CLTuneConfigError('overlap outside [0, 1]')
		table.setflags(write=False)
		self.transition_table = table
		self.overlap          = overlap
		self.seed             = seed

	@classmethod
	def random(cls, alphabet_size: int, concentration: float, seed: int,
	           support: Optional[int] = None) -> 'DomainSpec':
		"""A Dirichlet-drawn table.  With ``support``, the successors of a
		   context ``(a, b)`` are confined to ``support`` symbols chosen per
		   ``b``, always including ``b + 1`` so the chain is irreducible;
		   ``a`` only reweights them."""
		if alphabet_size <= 0 or concentration <= 0:
			raise CLTuneConfigError('alphabet size and concentration '
			                        'must be positive')
		if support is not None and support <= 0:
			raise CLTuneConfigError('support must be positive')
		rng = stream(seed, 'transition-table')
		if support is None or support >= alphabet_size:
			table = rng.dirichlet(np.full(alphabet_size, concentration),
			                      size=(alphabet_size, alphabet_size))
		else:
			table = np.zeros((alphabet_size,) * 3)
			for b in range(alphabet_size):
				step = (b + 1) % alphabet_size
				others = rng.permutation(
					[c for c in range(alphabet_size) if c != step])
				successors = np.concatenate([[step], others[:support-1]])
				table[:, b, successors] = rng.dirichlet(
					np.full(support, concentration), size=alphabet_size)
		table /= table.sum(axis=-1, keepdims=True)
		return cls(table, 0.0, seed)

	def blend(self, source: 'DomainSpec', overlap: float) -> 'DomainSpec':
		"""This domain pulled toward ``source``; at overlap 1 the tables
		   are identical."""
		if source.alphabet_size != self.alphabet_size:
			raise CLTuneConfigError('alphabet sizes differ')
		table = (overlap * source.transition_table +
		         (1 - overlap) * self.transition_table)
		return DomainSpec(table, overlap, self.seed)

	@property
	def alphabet_size(self) -> int:
		return self.transition_table.shape[0]

	@property
	def vocab_size(self) -> int:
		return self.alphabet_size + NSPECIAL


class TokenStream(object):
	__slots__ = ('tokens', 'domain', 'split')

	def __init__(self, tokens, domain: Domain = Domain.SOURCE,
	             split: Split = Split.TRAIN) -> None:
		tokens = np.array(tokens, dtype=np.int64)
		if tokens.ndim != 1:
			raise CLTuneConfigError('token stream must be flat')
		if tokens.size and tokens.min() < NSPECIAL:
			raise CLTuneConfigError('reserved token in stream')
		tokens.setflags(write=False)
		self.tokens = tokens
		self.domain = domain
		self.split  = split

	def __len__(self) -> int:
		return self.tokens.shape[0]


def sample_tokens(spec: DomainSpec, n_tokens: int, rng) -> np.ndarray:
	cumulative = np.cumsum(spec.transition_table, axis=-1).tolist()
	last = spec.alphabet_size - 1
	out = [0] * n_tokens
	a = b = 0
	for i, u in enumerate(rng.random(n_tokens).tolist()):
		token = min(bisect_right(cumulative[a][b], u), last)
		out[i] = token
		a, b = b, token
	return np.asarray(out, dtype=np.int64) + NSPECIAL


def generate_domain(spec: DomainSpec, n_tokens: int,
                    domain: Domain = Domain.SOURCE,
                    split: Split = Split.TRAIN) -> TokenStream:
	if n_tokens <= 0:
		raise CLTuneConfigError('n_tokens must be positive')
	rng = stream(spec.seed, 'corpus-{}'.format(split.value))
	return TokenStream(sample_tokens(spec, n_tokens, rng), domain, split)


def pack_sequences(tokens: Union[TokenStream, np.ndarray], seq_len: int
                  ) -> np.ndarray:
	"""Contiguous windows of ``seq_len`` tokens; the tail is padded."""
	if seq_len <= 0:
		raise CLTuneConfigError('seq_len must be positive')
	flat = np.asarray(getattr(tokens, 'tokens', tokens), dtype=np.int64)
	count = -(-len(flat) // seq_len)
	rows = np.full(count * seq_len, PAD, dtype=np.int64)
	rows[:len(flat)] = flat
	return rows.reshape(count, seq_len)


def sample_rows(spec: DomainSpec, n_rows: int, seq_len: int, rng
               ) -> np.ndarray:
	return pack_sequences(sample_tokens(spec, n_rows * seq_len, rng),
	                      seq_len)


class MaskedBatch(object):
	"""Rows with some positions hidden.  ``rows``/``cols`` index the
	   masked positions in row-major order; ``labels`` are the original
	   tokens there and ``corruption`` says what replaced them (0 mask
	   token, 1 random token, 2 unchanged)."""

	__slots__ = ('input_ids', 'attention_mask', 'originals', 'rows', 'cols',
	             'labels', 'corruption', 'rng_stream_id')

	def __init__(self, input_ids, attention_mask, originals, rows, cols,
	             labels, corruption, rng_stream_id: str = '') -> None:
		self.input_ids      = np.asarray(input_ids, dtype=np.int64)
		self.attention_mask = np.asarray(attention_mask, dtype=bool)
		self.originals      = np.asarray(originals, dtype=np.int64)
		self.rows           = np.asarray(rows, dtype=np.int64)
		self.cols           = np.asarray(cols, dtype=np.int64)
		self.labels         = np.asarray(labels, dtype=np.int64)
		self.corruption     = np.asarray(corruption, dtype=np.int8)
		self.rng_stream_id  = rng_stream_id

	def __len__(self) -> int:
		return self.input_ids.shape[0]

	def __eq__(self, other):
		if not isinstance(other, MaskedBatch):
			return NotImplemented
		return (self.rng_stream_id == other.rng_stream_id and
		        all(np.array_equal(getattr(self, name),
		                           getattr(other, name))
		            for name in self.__slots__[:-1]))

	__hash__ = None  # type: ignore

	@property
	def n_masked(self) -> int:
		return self.labels.shape[0]

	@property
	def mask_positions(self) -> List[np.ndarray]:
		return [self.cols[self.rows == i] for i in range(len(self))]

	@property
	def flat_positions(self) -> np.ndarray:
		return self.rows * self.input_ids.shape[1] + self.cols

	def select(self, indices) -> 'MaskedBatch':
		indices = np.asarray(indices, dtype=np.int64)
		renumber = np.full(len(self), -1, dtype=np.int64)
		renumber[indices] = np.arange(len(indices))
		keep = renumber[self.rows] >= 0
		order = np.lexsort((self.cols[keep], renumber[self.rows[keep]]))
		return MaskedBatch(self.input_ids[indices],
		                   self.attention_mask[indices],
		                   self.originals[indices],
		                   renumber[self.rows[keep]][order],
		                   self.cols[keep][order],
		                   self.labels[keep][order],
		                   self.corruption[keep][order],
		                   self.rng_stream_id)


def mask_batch(rows, rng, vocab_size: int, stream_id: str = '',
               corrupt: bool = True) -> MaskedBatch:
	"""Hide ceil(15%) of the non-padding positions of every row.  With
	   ``corrupt`` a hidden position becomes the mask token 80% of the
	   time, a random token 10% and stays as it is 10%; without it every
	   hidden position becomes the mask token."""
	rows = np.asarray(rows, dtype=np.int64)
	if rows.ndim != 2:
		raise CLTuneConfigError('rows must be a matrix')
	attention = rows != PAD
	if not attention.any(axis=1).all():
		raise CLTuneConfigError('all-padding row in batch')
	input_ids = rows.copy()
	rs: List[np.ndarray] = []
	cs: List[np.ndarray] = []
	kinds: List[np.ndarray] = []
	for i in range(rows.shape[0]):
		positions = np.flatnonzero(attention[i])
		count = -(-MASK_PERCENT * len(positions) // 100)
		chosen = np.sort(rng.choice(positions, size=count, replace=False))
		draws = rng.random(count)
		noise = rng.integers(NSPECIAL, vocab_size, size=count)
		if corrupt:
			kind = np.where(draws < 0.8, 0, np.where(draws < 0.9, 1, 2))
		else:
			kind = np.zeros(count, dtype=np.int64)
		input_ids[i, chosen[kind == 0]] = MASK
		input_ids[i, chosen[kind == 1]] = noise[kind == 1]
		rs.append(np.full(count, i))
		cs.append(chosen)
		kinds.append(kind)
	r = np.concatenate(rs) if rs else np.zeros(0, dtype=np.int64)
	c = np.concatenate(cs) if cs else np.zeros(0, dtype=np.int64)
	k = np.concatenate(kinds) if kinds else np.zeros(0, dtype=np.int64)
	return MaskedBatch(input_ids, attention, rows, r, c, rows[r, c], k,
	                   stream_id)


def unmasked(rows) -> MaskedBatch:
	rows = np.asarray(rows, dtype=np.int64)
	empty = np.zeros(0, dtype=np.int64)
	return MaskedBatch(rows, rows != PAD, rows, empty, empty, empty, empty)


class RowSampler(object):
	"""Row indices in a fresh random order each epoch."""

	__slots__ = ('count', 'rng', '_order', '_cursor')

	def __init__(self, count: int, rng) -> None:
		if count <= 0:
			raise CLTuneConfigError('no rows to sample from')
		self.count   = count
		self.rng     = rng
		self._order  = np.zeros(0, dtype=np.int64)
		self._cursor = 0

	def next(self, batch_size: int) -> np.ndarray:
		out = []
		needed = batch_size
		while needed:
			if self._cursor == len(self._order):
				self._order = self.rng.permutation(self.count)
				self._cursor = 0
			take = self._order[self._cursor:self._cursor+needed]
			self._cursor += len(take)
			needed -= len(take)
			out.append(take)
		return np.concatenate(out)


class Corpora(object):
	"""Packed train and validation rows of both domains."""

	__slots__ = ('source_train', 'source_val', 'target_train', 'target_val',
	             'vocab_size')

	def __init__(self, source_train, source_val, target_train, target_val,
	             vocab_size: int) -> None:
		self.source_train = np.asarray(source_train, dtype=np.int64)
		self.source_val   = np.asarray(source_val,   dtype=np.int64)
		self.target_train = np.asarray(target_train, dtype=np.int64)
		self.target_val   = np.asarray(target_val,   dtype=np.int64)
		self.vocab_size   = vocab_size

	def train(self, domain: Domain) -> np.ndarray:
		return (self.source_train if domain is Domain.SOURCE
		        else self.target_train)

	def validation(self, domain: Domain) -> np.ndarray:
		return (self.source_val if domain is Domain.SOURCE
		        else self.target_val)


# Cache files

_MAGIC = '#cltune-corpus v1'


def corpus_header(domain: Domain, split: Split, seed: int,
                  digest: str = '') -> str:
	return '{} domain={} split={} seed={} digest={}'.format(
		_MAGIC, domain.value, split.value, seed, digest)


def write_corpus(path, tokens: TokenStream, seed: int, digest: str = ''
                ) -> None:
	path = fspath(path)
	with open(path + '.tmp', 'w', encoding='ascii', newline='\n') as file:
		file.write(corpus_header(tokens.domain, tokens.split, seed,
		                         digest))
		file.write('\n')
		file.writelines('{}\n'.format(t) for t in tokens.tokens.tolist())
	replace(path + '.tmp', path)
	logger.info('wrote %d tokens to %s', len(tokens), path)


def _parse_header(line: str) -> Dict[str, str]:
	if not line.startswith(_MAGIC + ' '):
		raise CLTuneDecodeError('malformed corpus header')
	fields = {}
	for item in line[len(_MAGIC):].split():
		key, sep, value = item.partition('=')
		if not sep:
			raise CLTuneDecodeError('malformed corpus header')
		fields[key] = value
	for key in ('domain', 'split', 'seed'):
		if key not in fields:
			raise CLTuneDecodeError('corpus header lacks {}'.format(key))
	return fields


def read_corpus_header(path) -> Optional[Dict[str, str]]:
	"""The header fields of an existing cache file, or None."""
	try:
		with open(path, 'r', encoding='ascii') as file:
			return _parse_header(file.readline().rstrip('\n'))
	except FileNotFoundError:
		return None
	except UnicodeDecodeError:
		raise CLTuneDecodeError('malformed corpus header')


def read_corpus(path) -> Tuple[Dict[str, str], TokenStream]:
	try:
		with open(path, 'r', encoding='ascii') as file:
			header = _parse_header(file.readline().rstrip('\n'))
			try:
				tokens = [int(line) for line in file]
			except ValueError:
				raise CLTuneDecodeError('malformed corpus token')
	except FileNotFoundError:
		raise CLTuneMissingError('corpus cache', path)
	domain = Domain.json_to(header['domain'])
	split = Split.json_to(header['split'])
	try:
		return header, TokenStream(tokens, domain, split)
	except CLTuneConfigError as e:
		raise CLTuneDecodeError(str(e))
