from logging import getLogger
import sys
from typing import List, NoReturn
from ..config import corpus_fields, corpus_tokens
from ..corpus import Domain, Split, read_corpus_header, write_corpus
from ..errors import CLTuneMismatchError
from . import EX_CONFIG, experiment, guard, options, prog, setup_logging

logger = getLogger(__name__)

DOMAINS = {'source': Domain.SOURCE, 'target': Domain.TARGET}
SPLITS  = {'train': Split.TRAIN, 'val': Split.VALIDATION}


def usage() -> NoReturn:
	print('Usage: {} gen-corpus --config CONFIG --domain {{source|target}} '
	      '--split {{train|val}} [--force]'.format(prog()), file=sys.stderr)
	exit(EX_CONFIG)


def run(args: List[str]) -> None:
	opts = options(args, usage, 'c:d:s:f',
	               ['config=', 'domain=', 'split=', 'force'])
	if 'config' not in opts or opts.get('domain') not in DOMAINS or \
	   opts.get('split') not in SPLITS:
		usage()
	domain, split = DOMAINS[opts['domain']], SPLITS[opts['split']]

	config, layout, _ = experiment(opts['config'])
	path = layout.corpus(domain, split)
	expected = corpus_fields(config, domain, split)
	header = read_corpus_header(path)
	if header == expected and 'force' not in opts:
		logger.info('%s is up to date', path)
		return
	if header is not None and header != expected and 'force' not in opts:
		raise CLTuneMismatchError('{}: existing corpus has seed {} and '
		                          'digest {}, config has seed {} and digest '
		                          '{}; use --force to overwrite'
		                          .format(path, header.get('seed'),
		                                  header.get('digest') or '-',
		                                  expected['seed'],
		                                  expected['digest']))

	tokens = corpus_tokens(config, domain, split)
	write_corpus(layout.ensure(path), tokens, int(expected['seed']),
	             expected['digest'])


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
