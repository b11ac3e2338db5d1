from hypothesis import given
from hypothesis.strategies import integers
import numpy as np
from os.path import exists
from pytest import raises  # type: ignore

from cltune import MASK, NSPECIAL, PAD
from cltune.corpus import Corpora, Domain, DomainSpec, RowSampler, Split, \
                          TokenStream, corpus_header, generate_domain, \
                          mask_batch, pack_sequences, read_corpus, \
                          read_corpus_header, sample_rows, sample_tokens, \
                          unmasked, write_corpus
from cltune.errors import CLTuneConfigError, CLTuneDecodeError, \
                          CLTuneMissingError
from cltune.streams import stream


def cycle_table(size):
	"""Every context (a, b) is followed by b + 1 with certainty."""
	table = np.zeros((size, size, size))
	for b in range(size):
		table[:, b, (b + 1) % size] = 1
	return table


def test_DomainSpec_random():
	spec = DomainSpec.random(6, 0.5, 11)
	assert spec.transition_table.shape == (6, 6, 6)
	assert np.allclose(spec.transition_table.sum(axis=-1), 1)
	assert spec.vocab_size == 6 + NSPECIAL
	assert np.array_equal(spec.transition_table,
	                      DomainSpec.random(6, 0.5, 11).transition_table)
	assert not np.array_equal(spec.transition_table,
	                          DomainSpec.random(6, 0.5, 12).transition_table)

def test_DomainSpec_random_support():
	spec = DomainSpec.random(10, 0.5, 3, support=3)
	table = spec.transition_table
	assert np.allclose(table.sum(axis=-1), 1)
	for b in range(10):
		successors = np.flatnonzero(table[:, b].sum(axis=0))
		assert len(successors) <= 3
		assert (table[:, b, (b + 1) % 10] > 0).all()
	assert np.array_equal(table, DomainSpec.random(10, 0.5, 3,
	                                               support=3).transition_table)
	dense = DomainSpec.random(4, 0.5, 3, support=9).transition_table
	assert np.array_equal(dense, DomainSpec.random(4, 0.5, 3).transition_table)
	with raises(CLTuneConfigError, match='support must be positive'):
		DomainSpec.random(10, 0.5, 3, support=0)

def test_DomainSpec_invalid():
	with raises(CLTuneConfigError, match='invalid probability table'):
		DomainSpec(np.full((2, 2, 2), 0.3))
	with raises(CLTuneConfigError, match='invalid probability table'):
		DomainSpec(np.ones((2, 2)))
	with raises(CLTuneConfigError, match=r'overlap outside \[0, 1\]'):
		DomainSpec(cycle_table(3), overlap=1.5)
	with raises(CLTuneConfigError, match='must be positive'):
		DomainSpec.random(0, 0.5, 0)

def test_DomainSpec_blend():
	source = DomainSpec.random(5, 0.5, 1)
	target = DomainSpec.random(5, 0.5, 2)
	assert np.allclose(target.blend(source, 1.0).transition_table,
	                   source.transition_table)
	assert np.array_equal(target.blend(source, 0.0).transition_table,
	                      target.transition_table)
	half = target.blend(source, 0.5)
	assert half.overlap == 0.5 and half.seed == 2
	with raises(CLTuneConfigError, match='alphabet sizes differ'):
		target.blend(DomainSpec.random(4, 0.5, 1), 0.5)

def test_sample_tokens_deterministic_table():
	spec = DomainSpec(cycle_table(4))
	tokens = sample_tokens(spec, 10, stream(0, 'x'))
	assert np.array_equal(tokens, (np.arange(10) + 1) % 4 + NSPECIAL)

def test_sample_tokens_frequencies():
	spec = DomainSpec.random(3, 1.0, 5)
	tokens = sample_tokens(spec, 60000, stream(0, 'x')) - NSPECIAL
	counts = np.zeros((3, 3, 3))
	np.add.at(counts, (tokens[:-2], tokens[1:-1], tokens[2:]), 1)
	a, b = np.unravel_index(counts.sum(axis=-1).argmax(), (3, 3))
	empirical = counts[a, b] / counts[a, b].sum()
	assert np.abs(empirical - spec.transition_table[a, b]).max() < 0.05

def test_generate_domain():
	spec = DomainSpec.random(8, 0.5, 3)
	train = generate_domain(spec, 500, Domain.TARGET, Split.TRAIN)
	assert len(train) == 500
	assert train.domain is Domain.TARGET and train.split is Split.TRAIN
	assert train.tokens.min() >= NSPECIAL
	assert train.tokens.max() < spec.vocab_size
	assert np.array_equal(train.tokens,
	                      generate_domain(spec, 500, Domain.TARGET).tokens)
	val = generate_domain(spec, 500, Domain.TARGET, Split.VALIDATION)
	assert not np.array_equal(train.tokens, val.tokens)
	with raises(CLTuneConfigError, match='n_tokens must be positive'):
		generate_domain(spec, 0)

def test_TokenStream_invalid():
	with raises(CLTuneConfigError, match='reserved token in stream'):
		TokenStream([5, MASK, 6])
	with raises(CLTuneConfigError, match='token stream must be flat'):
		TokenStream([[5, 6]])

@given(integers(min_value=1, max_value=50), integers(min_value=1,
                                                      max_value=9))
def test_pack_sequences(n, seq_len):
	tokens = np.arange(n) + NSPECIAL
	rows = pack_sequences(tokens, seq_len)
	assert rows.shape == (-(-n // seq_len), seq_len)
	assert np.array_equal(rows.ravel()[:n], tokens)
	assert (rows.ravel()[n:] == PAD).all()

def test_pack_sequences_invalid():
	with raises(CLTuneConfigError, match='seq_len must be positive'):
		pack_sequences(np.arange(4, 10), 0)

def test_sample_rows():
	spec = DomainSpec.random(4, 0.5, 0)
	rows = sample_rows(spec, 3, 7, stream(0, 'rows'))
	assert rows.shape == (3, 7) and (rows >= NSPECIAL).all()


def test_mask_batch_counts():
	rows = np.full((3, 20), 7)
	rows[1, 10:] = PAD
	rows[2, 1:] = PAD
	batch = mask_batch(rows, stream(0, 'masking'), 12)
	assert [len(p) for p in batch.mask_positions] == [3, 2, 1]
	assert np.array_equal(batch.labels, rows[batch.rows, batch.cols])
	assert not batch.attention_mask[1, 10:].any()
	assert batch.n_masked == 6
	untouched = np.ones(rows.shape, dtype=bool)
	untouched[batch.rows, batch.cols] = False
	assert np.array_equal(batch.input_ids[untouched], rows[untouched])

def test_mask_batch_corruption():
	rows = stream(1, 'rows').integers(NSPECIAL, 40, size=(1000, 64))
	batch = mask_batch(rows, stream(1, 'masking'), 40)
	kinds = np.bincount(batch.corruption, minlength=3) / batch.n_masked
	assert np.abs(kinds - [0.8, 0.1, 0.1]).max() < 0.02
	masked = batch.input_ids[batch.rows, batch.cols]
	assert (masked[batch.corruption == 0] == MASK).all()
	assert np.array_equal(masked[batch.corruption == 2],
	                      batch.labels[batch.corruption == 2])
	assert (masked[batch.corruption == 1] >= NSPECIAL).all()

def test_mask_batch_plain():
	rows = stream(1, 'rows').integers(NSPECIAL, 40, size=(10, 32))
	batch = mask_batch(rows, stream(1, 'masking'), 40, corrupt=False)
	assert (batch.input_ids[batch.rows, batch.cols] == MASK).all()
	assert (batch.corruption == 0).all()

def test_mask_batch_deterministic():
	rows = stream(2, 'rows').integers(NSPECIAL, 20, size=(5, 16))
	a = mask_batch(rows, stream(7, 'masking-source'), 20, 'masking-source')
	b = mask_batch(rows, stream(7, 'masking-source'), 20, 'masking-source')
	assert a == b
	assert a != mask_batch(rows, stream(8, 'masking-source'), 20,
	                       'masking-source')

def test_mask_batch_invalid():
	with raises(CLTuneConfigError, match='all-padding row in batch'):
		mask_batch(np.array([[5, 6], [PAD, PAD]]), stream(0, 'm'), 8)
	with raises(CLTuneConfigError, match='rows must be a matrix'):
		mask_batch(np.array([5, 6]), stream(0, 'm'), 8)

def test_MaskedBatch_select():
	rows = stream(2, 'rows').integers(NSPECIAL, 20, size=(6, 16))
	batch = mask_batch(rows, stream(2, 'masking'), 20)
	part = batch.select([4, 1])
	assert np.array_equal(part.input_ids, batch.input_ids[[4, 1]])
	assert np.array_equal(part.mask_positions[0], batch.mask_positions[4])
	assert np.array_equal(part.mask_positions[1], batch.mask_positions[1])
	assert part.n_masked == (batch.mask_positions[4].size +
	                         batch.mask_positions[1].size)
	assert np.array_equal(part.labels,
	                      part.originals[part.rows, part.cols])

def test_unmasked():
	batch = unmasked(np.array([[5, 6, PAD]]))
	assert batch.n_masked == 0
	assert batch.attention_mask.tolist() == [[True, True, False]]

def test_RowSampler_epochs():
	sampler = RowSampler(7, stream(0, 'data-order'))
	first = sampler.next(7)
	assert sorted(first.tolist()) == list(range(7))
	second = np.concatenate([sampler.next(3), sampler.next(4)])
	assert sorted(second.tolist()) == list(range(7))
	assert len(sampler.next(10)) == 10
	with raises(CLTuneConfigError, match='no rows to sample from'):
		RowSampler(0, stream(0, 'data-order'))

def test_Corpora():
	data = Corpora(np.ones((2, 4)), np.zeros((1, 4)), np.ones((3, 4)),
	               np.zeros((0, 4)), 20)
	assert data.train(Domain.TARGET).shape == (3, 4)
	assert data.validation(Domain.SOURCE).shape == (1, 4)


def test_corpus_roundtrip(tmp_path):
	path = tmp_path / 's-train.txt'
	tokens = TokenStream([5, 9, 4, 4], Domain.SOURCE, Split.TRAIN)
	write_corpus(path, tokens, 17, 'abc')
	assert not exists(str(path) + '.tmp')
	with open(path) as file:
		assert file.readline().rstrip('\n') == \
		       corpus_header(Domain.SOURCE, Split.TRAIN, 17, 'abc')
	header, read = read_corpus(path)
	assert header == {'domain': 's', 'split': 'train', 'seed': '17',
	                  'digest': 'abc'}
	assert np.array_equal(read.tokens, tokens.tokens)
	assert read.domain is Domain.SOURCE and read.split is Split.TRAIN
	assert read_corpus_header(path) == header

def test_corpus_missing(tmp_path):
	assert read_corpus_header(tmp_path / 'none.txt') is None
	with raises(CLTuneMissingError, match='missing corpus cache'):
		read_corpus(tmp_path / 'none.txt')

def test_corpus_malformed(tmp_path):
	path = tmp_path / 'bad.txt'
	path.write_text('tokens\n5\n')
	with raises(CLTuneDecodeError, match='malformed corpus header'):
		read_corpus(path)
	path.write_text(corpus_header(Domain.TARGET, Split.VALIDATION, 1) +
	                '\n5\nfive\n')
	with raises(CLTuneDecodeError, match='malformed corpus token'):
		read_corpus(path)
	path.write_text(corpus_header(Domain.TARGET, Split.VALIDATION, 1) +
	                '\n5\n1\n')
	with raises(CLTuneDecodeError, match='reserved token in stream'):
		read_corpus(path)
