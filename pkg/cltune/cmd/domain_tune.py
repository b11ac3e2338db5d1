from logging import getLogger
import sys
from typing import List, NoReturn, Optional
from ..config import load_corpora
from ..container import load_checkpoint, load_fisher
from ..errors import CLTuneDecodeError
from ..metrics import MetricsLog
from ..strategies import DEFAULT_LAMBDA, Kind, StrategyConfig
from ..trainer import domain_tune
from . import EX_CONFIG, expect_digest, experiment, guard, options, prog, \
              setup_logging

logger = getLogger(__name__)


def usage() -> NoReturn:
	print('Usage: {} domain-tune --config CONFIG --strategy '
	      '{{sdt|rh|l2|ewc|gem|dis}} [--lambda LAMBDA]'.format(prog()),
	      file=sys.stderr)
	exit(EX_CONFIG)


def run(args: List[str]) -> None:
	opts = options(args, usage, 'c:s:l:', ['config=', 'strategy=', 'lambda='])
	if 'config' not in opts or 'strategy' not in opts:
		usage()
	try:
		kind = Kind.json_to(opts['strategy'])
	except CLTuneDecodeError:
		usage()
	lam: Optional[float] = None
	if 'lambda' in opts:
		try:
			lam = float(opts['lambda'])
		except ValueError:
			usage()

	config, layout, digest = experiment(opts['config'])
	section = config.tune(kind)
	if lam is None:
		lam = section.lambda_
	if lam is None:
		lam = DEFAULT_LAMBDA[kind]
		logger.info('using default lambda %g for %s', lam, kind.value)

	path = layout.checkpoint('pretrain')
	init, container = load_checkpoint(path, 'pretrain checkpoint')
	expect_digest(container, digest, path)
	fisher = None
	if kind is Kind.EWC:
		fisher, container = load_fisher(layout.fisher())
		expect_digest(container, digest, layout.fisher())

	strategy = StrategyConfig(
		kind, lam,
		anchor=init if kind in (Kind.L2, Kind.EWC) else None,
		fisher=fisher,
		teacher=init if kind is Kind.DIS else None)
	data = load_corpora(config, section.seq_len, layout)
	log = MetricsLog(layout.ensure(layout.metrics(kind.value)),
	                 truncate=True)
	domain_tune(section, init, data, config.streams(), strategy, log,
	            checkpoint=layout.checkpoint(kind.value), digest=digest,
	            model_config=config.model)


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
