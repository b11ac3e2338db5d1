from io import BytesIO
from json import loads
from logging import getLogger
from os import fspath, replace
from struct import Struct
from typing import Any, Dict, Optional, Tuple
import numpy as np

from . import MAGIC
from .errors import CLTuneDecodeError, CLTuneMismatchError, \
                    CLTuneMissingError
from .model import ModelConfig, ParamVector, parameter_count
from .strategies import FisherDiagonal
from .typing import canonical

__all__ = ('Container', 'save_checkpoint', 'load_checkpoint',
           'save_fisher', 'load_fisher')

logger = getLogger(__name__)

_VALUES = np.dtype('<f4')


def _read(file, length):
	data = bytearray(length)
	with memoryview(data) as buf:
		while buf:
			count = file.readinto(buf)
			if not count:
				raise CLTuneDecodeError('truncated container')
			buf = buf[count:]
	return data


def _write(file, data):
	with memoryview(data) as buf:
		while buf:
			buf = buf[file.write(buf):]


class Container(object):
	"""Magic, a length-prefixed JSON header, then float32 values."""

	MAGIC    = MAGIC
	VERSION  = 1
	KINDS    = ('checkpoint', 'fisher')
	__STRUCT = Struct('<8sI')

	__slots__ = ('kind', 'model_config', 'digest', 'metadata', 'values')

	def __init__(self, kind: str, model_config: ModelConfig,
	             values: np.ndarray, digest: str = '',
	             metadata: Optional[Dict[str, Any]] = None) -> None:
		assert kind in self.KINDS
		self.kind         = kind
		self.model_config = model_config
		self.digest       = digest
		self.metadata     = dict(metadata or {})
		self.values       = np.asarray(values, dtype=np.float32)

	def header(self) -> Dict[str, Any]:
		return {'version':           self.VERSION,
		        'kind':              self.kind,
		        'model_config':      self.model_config.for_json(),
		        'param_count':       len(self.values),
		        'digest':            self.digest,
		        'strategy_metadata': self.metadata}

	def dump(self, file) -> None:
		header = canonical(self.header()).encode('utf-8')
		_write(file, self.__STRUCT.pack(self.MAGIC, len(header)))
		_write(file, header)
		_write(file, self.values.astype(_VALUES).tobytes())

	def encode(self) -> bytes:
		buf = BytesIO()
		self.dump(buf)
		return buf.getvalue()

	@classmethod
	def load(cls, file) -> 'Container':
		struct = cls.__STRUCT
		magic, length = struct.unpack(_read(file, struct.size))
		if magic != cls.MAGIC:
			raise CLTuneDecodeError('invalid container magic')
		try:
			header = loads(_read(file, length).decode('utf-8'))
		except ValueError:
			raise CLTuneDecodeError('malformed container header')
		if not isinstance(header, dict):
			raise CLTuneDecodeError('malformed container header')
		if header.get('version') != cls.VERSION:
			raise CLTuneDecodeError('unknown container version')
		kind = header.get('kind')
		if kind not in cls.KINDS:
			raise CLTuneDecodeError('unknown container kind {!r}'
			                        .format(kind))
		config = ModelConfig.json_to(header.get('model_config'))
		count = header.get('param_count')
		if not isinstance(count, int) or count < 0:
			raise CLTuneDecodeError('invalid parameter count')
		if count != parameter_count(config):
			raise CLTuneDecodeError('parameter count does not match '
			                        'model config')
		raw = _read(file, count * _VALUES.itemsize)
		values = np.frombuffer(bytes(raw), dtype=_VALUES).astype(np.float32)
		return cls(kind, config, values,
		           digest=str(header.get('digest', '')),
		           metadata=header.get('strategy_metadata') or {})

	@classmethod
	def decode(cls, buffer: bytes) -> 'Container':
		buf = BytesIO(buffer)
		container = cls.load(buf)
		if buf.tell() != len(buffer):
			raise CLTuneDecodeError('trailing data after container')
		return container

	def save(self, path) -> None:
		path = fspath(path)
		with open(path + '.tmp', 'wb') as file:
			self.dump(file)
		replace(path + '.tmp', path)

	@classmethod
	def open(cls, path, kind: str, what: Optional[str] = None
	        ) -> 'Container':
		try:
			with open(path, 'rb') as file:
				container = cls.load(file)
				if file.read(1):
					raise CLTuneDecodeError('trailing data after '
					                        'container')
		except FileNotFoundError:
			raise CLTuneMissingError(what or kind, path)
		if container.kind != kind:
			raise CLTuneMismatchError('{} is a {}, not a {}'
			                          .format(fspath(path),
			                                  container.kind, kind))
		return container


def save_checkpoint(path, params: ParamVector, digest: str = '',
                    metadata: Optional[Dict[str, Any]] = None) -> None:
	Container('checkpoint', params.config, params.values, digest,
	          metadata).save(path)
	logger.info('wrote checkpoint %s', fspath(path))


def load_checkpoint(path, what: str = 'checkpoint'
                   ) -> Tuple[ParamVector, Container]:
	container = Container.open(path, 'checkpoint', what)
	return ParamVector(container.values, container.model_config), container


def save_fisher(path, fisher: FisherDiagonal, config: ModelConfig,
                digest: str = '',
                metadata: Optional[Dict[str, Any]] = None) -> None:
	meta = dict(metadata or {})
	meta.update(n_batches_used=fisher.n_batches_used,
	            source_seed=fisher.source_seed)
	Container('fisher', config, fisher.values, digest, meta).save(path)
	logger.info('wrote fisher diagonal %s', fspath(path))


def load_fisher(path) -> Tuple[FisherDiagonal, Container]:
	container = Container.open(path, 'fisher', 'fisher artifact')
	meta = container.metadata
	try:
		fisher = FisherDiagonal(container.values,
		                        n_batches_used=int(meta['n_batches_used']),
		                        source_seed=int(meta['source_seed']))
	except (KeyError, TypeError, ValueError):
		raise CLTuneDecodeError('malformed fisher metadata')
	return fisher, container
