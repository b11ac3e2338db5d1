import sys
from typing import List, NoReturn
from ..report import write_report
from . import EX_CONFIG, experiment, guard, options, prog, setup_logging


def usage() -> NoReturn:
	print('Usage: {} report --config CONFIG'.format(prog()), file=sys.stderr)
	exit(EX_CONFIG)


def run(args: List[str]) -> None:
	opts = options(args, usage, 'c:', ['config='])
	if 'config' not in opts:
		usage()

	_, layout, _ = experiment(opts['config'])
	for path in write_report(layout.root, layout.report('')):
		print(path)


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
