import sys
from typing import List, NoReturn
from ..config import load_corpora
from ..metrics import MetricsLog
from ..trainer import pretrain
from . import EX_CONFIG, experiment, guard, options, prog, setup_logging


def usage() -> NoReturn:
	print('Usage: {} pretrain --config CONFIG'.format(prog()), file=sys.stderr)
	exit(EX_CONFIG)


def run(args: List[str]) -> None:
	opts = options(args, usage, 'c:', ['config='])
	if 'config' not in opts:
		usage()

	config, layout, digest = experiment(opts['config'])
	data = load_corpora(config, config.pretrain.seq_len, layout)
	log = MetricsLog(layout.ensure(layout.metrics('pretrain')),
	                 truncate=True)
	pretrain(config.pretrain, config.model, data, config.streams(), log,
	         checkpoint=layout.checkpoint('pretrain'), digest=digest)


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
