from logging import getLogger
import sys
from typing import List, NoReturn
from ..config import load_corpora
from ..container import load_checkpoint, save_fisher
from ..corpus import RowSampler, mask_batch
from ..model import parameter_groups
from ..strategies import estimate_fisher_diagonal
from . import EX_CONFIG, expect_digest, experiment, guard, options, prog, \
              setup_logging

logger = getLogger(__name__)


def usage() -> NoReturn:
	print('Usage: {} fisher --config CONFIG'.format(prog()), file=sys.stderr)
	exit(EX_CONFIG)


def run(args: List[str]) -> None:
	opts = options(args, usage, 'c:', ['config='])
	if 'config' not in opts:
		usage()

	config, layout, digest = experiment(opts['config'])
	path = layout.checkpoint('pretrain')
	params, container = load_checkpoint(path, 'pretrain checkpoint')
	expect_digest(container, digest, path)

	rows = load_corpora(config, config.pretrain.seq_len, layout).source_train
	streams = config.streams()
	order = RowSampler(len(rows), streams.fresh('fisher-sampling'))
	masking = streams.fresh('fisher-masking')
	batch_size = config.fisher.batch_size or config.pretrain.batch_size
	batches = (mask_batch(rows[order.next(batch_size)], masking,
	                      config.model.vocab_size, 'fisher-masking')
	           for _ in range(config.fisher.n_batches))
	fisher = estimate_fisher_diagonal(
		params, batches, source_seed=streams.seed('fisher-sampling'))

	means = fisher.group_means(parameter_groups(params.config))
	for name, mean in means.items():
		logger.info('mean fisher %s: %.4g', name, mean)
	save_fisher(layout.ensure(layout.fisher()), fisher, params.config,
	            digest, {'group_means': means})


def main() -> None:
	from sys import argv
	setup_logging()
	guard(run, argv[1:])
