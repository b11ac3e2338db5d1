from logging import getLogger
import sys
from time import perf_counter
from typing import List, NoReturn
from ..config import domains
from ..container import load_checkpoint
from ..corpus import Domain
from ..metrics import MetricsLog, MetricsRecord, Phase
from ..probes import domain_shift_eval, finetune_probe, make_probe_task, \
                     mi_gap
from ..strategies import Kind
from . import EX_CONFIG, expect_digest, experiment, guard, options, prog, \
              setup_logging

logger = getLogger(__name__)

TASKS = ('target', 'source', 'shift', 'mi')


def usage() -> NoReturn:
	print('Usage: {} probe --config CONFIG --strategy '
	      '{{ndt|sdt|rh|l2|ewc|gem|dis}} --task {{target|source|shift|mi}}'
	      .format(prog()), file=sys.stderr)
	exit(EX_CONFIG)


def run_name(strategy: str) -> str:
	"""The output subdirectory holding a strategy's checkpoint."""
	return 'pretrain' if strategy == 'ndt' else strategy


def run(args: List[str]) -> None:  # pylint: disable=too-many-locals
	opts = options(args, usage, 'c:s:t:', ['config=', 'strategy=', 'task='])
	strategy, task = opts.get('strategy'), opts.get('task')
	if 'config' not in opts or task not in TASKS or \
	   strategy not in ['ndt'] + [k.value for k in Kind]:
		usage()

	config, layout, digest = experiment(opts['config'])
	probes = config.probes
	name = run_name(strategy)
	path = layout.checkpoint(name)
	params, container = load_checkpoint(path, '{} checkpoint'.format(name))
	expect_digest(container, digest, path)
	step = int(container.metadata.get('step', 0))

	source_spec, target_spec = domains(config)
	target = make_probe_task(target_spec, Domain.TARGET, probes.n_examples,
	                         probes.seed, probes.seq_len,
	                         test_fraction=probes.test_fraction)
	metrics = layout.metrics(name)
	log = MetricsLog(layout.ensure(metrics))
	clock = perf_counter()

	def record(**fields) -> None:
		nonlocal clock
		now = perf_counter()
		log.append(MetricsRecord(step=step, phase=Phase.PROBE,
		                         strategy=strategy,
		                         seed=config.streams().base,
		                         wall_ms=round((now - clock) * 1000, 3),
		                         digest=digest, probe_task=task, **fields))
		clock = now

	if task == 'mi':
		reference, other = load_checkpoint(layout.checkpoint('sdt'),
		                                   'sdt checkpoint')
		expect_digest(other, digest, layout.checkpoint('sdt'))
		gap = mi_gap(params, reference, target, probes)
		record(mi_gap=gap, n_test=len(target.test_labels))
		return

	if task == 'target':
		finetuned, evaluated = target, None
	else:
		source = make_probe_task(source_spec, Domain.SOURCE,
		                         probes.n_examples, probes.seed,
		                         probes.seq_len, rule=target.rule,
		                         test_fraction=probes.test_fraction)
		if task == 'source':
			finetuned, evaluated = source, None
		else:
			finetuned, evaluated = target, source

	for fraction in probes.train_fractions:
		result = finetune_probe(params, finetuned, probes, fraction)
		if evaluated is None:
			record(accuracy=result.accuracy, train_fraction=fraction,
			       n_test=result.n_test)
		else:
			accuracy = domain_shift_eval(result, evaluated)
			logger.info('shift accuracy %.4f (in-domain %.4f)', accuracy,
			            result.accuracy)
			record(accuracy=accuracy, train_fraction=fraction,
			       n_test=len(evaluated.test_labels))


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
