from getopt import GetoptError, getopt
from logging import DEBUG, INFO, basicConfig
from os import environ, execvp
from os.path import basename
import sys
from typing import Dict, List, NoReturn, Optional, Tuple
from ..config import ExperimentConfig, Layout, config_digest, load_config
from ..container import Container
from ..errors import CLTuneConfigError, CLTuneDecodeError, \
                     CLTuneMismatchError, CLTuneMissingError, \
                     CLTuneNumericalError

EX_CONFIG    = 1
EX_MISSING   = 2
EX_NUMERICAL = 3

CLTUNE_PROG       = 'CLTUNE_PROG'
CLTUNE_OUTPUT_DIR = 'CLTUNE_OUTPUT_DIR'
CLTUNE_DEBUG      = 'CLTUNE_DEBUG'


def osexit(e: OSError, code: int = EX_CONFIG) -> NoReturn:
	message = ('{}: {}'.format(e.filename, e.strerror)
	           if e.filename is not None else e.strerror)
	print(message, file=sys.stderr)
	exit(code)


def guard(_func, *args, **kwargs):
	try:
		_func(*args, **kwargs)
	except CLTuneMissingError as e:
		print(e, file=sys.stderr)
		exit(EX_MISSING)
	except (CLTuneConfigError, CLTuneDecodeError, CLTuneMismatchError) as e:
		print(e, file=sys.stderr)
		exit(EX_CONFIG)
	except CLTuneNumericalError as e:
		print(e, file=sys.stderr)
		exit(EX_NUMERICAL)
	except FileNotFoundError as e:
		osexit(e, EX_MISSING)
	except OSError as e:
		osexit(e)


def setup_logging() -> None:
	basicConfig(stream=sys.stderr, format='%(name)s: %(message)s',
	            level=DEBUG if environ.get(CLTUNE_DEBUG) else INFO)


def prog() -> str:
	return environ.get(CLTUNE_PROG, 'cltune')


def options(args: List[str], usage, shortopts: str, longopts: List[str]
           ) -> Dict[str, str]:
	"""Parse ``args`` into a mapping from long option name to value;
	   flags map to the empty string.  Positional arguments and repeated
	   options are usage errors."""
	try:
		opts, rest = getopt(args, shortopts, longopts)
	except GetoptError:
		usage()
	if rest:
		usage()
	names = {}
	for name in longopts:
		name = name.rstrip('=')
		names['--' + name] = name
		names['-' + name[0]] = name
	parsed: Dict[str, str] = {}
	for opt, arg in opts:
		name = names[opt]
		if name in parsed:
			usage()
		parsed[name] = arg
	return parsed


def experiment(path: str) -> Tuple[ExperimentConfig, Layout, str]:
	config = load_config(path)
	return config, Layout(config.output_dir), config_digest(config)


def expect_digest(container: Container, digest: str, path: str) -> None:
	if container.digest != digest:
		raise CLTuneMismatchError('{}: written under config digest {}, '
		                          'not {}'.format(path, container.digest,
		                                          digest))


def usage(prog: str) -> NoReturn:  # pylint: disable=redefined-outer-name
	print('Usage: {} [-o OUTPUT_DIR] COMMAND ...'.format(prog),
	      file=sys.stderr)
	exit(EX_CONFIG)


def run(prog: str, args: List[str]) -> None:  # pylint: disable=redefined-outer-name
	prog = basename(prog)
	environ[CLTUNE_PROG] = prog

	try:
		opts, args = getopt(args, 'o:')
	except GetoptError:
		usage(prog)
	if not args:
		usage(prog)
	command, *args = args
	if not all(c.isalnum() or c == '-' for c in command):
		usage(prog)

	output: Optional[str] = None
	for opt, arg in opts:
		if opt == '-o':
			output = arg
	if output is not None:
		environ[CLTUNE_OUTPUT_DIR] = output

	name = 'cltune-' + command
	try:
		execvp(name, [name] + args)
	except OSError as e:
		osexit(e)


def main() -> None:
	from sys import argv
	run(argv[0], argv[1:])
