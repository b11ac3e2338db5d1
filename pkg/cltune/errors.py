__all__ = ('CLTuneError', 'CLTuneDecodeError', 'CLTuneConfigError',
           'CLTuneShapeError', 'CLTuneNumericalError', 'CLTuneMissingError',
           'CLTuneMismatchError')


class CLTuneError(Exception):
	pass


class CLTuneDecodeError(ValueError, CLTuneError):
	pass


class CLTuneConfigError(ValueError, CLTuneError):
	pass


class CLTuneShapeError(ValueError, CLTuneError):
	@classmethod
	def check(cls, what, left, right):
		if tuple(left) != tuple(right):
			raise cls('{} shape mismatch: {} vs {}'
			          .format(what, tuple(left), tuple(right)))


class CLTuneNumericalError(ArithmeticError, CLTuneError):
	__slots__ = ('index', 'operation')

	def __init__(self, message, index=None, operation=None):
		super().__init__(message)
		self.index     = index
		self.operation = operation


class CLTuneMissingError(FileNotFoundError, CLTuneError):
	def __init__(self, what, filename, message=None):
		super().__init__(message or 'missing {}'.format(what))
		self.what     = what
		self.filename = str(filename)

	def __str__(self):
		return '{}: {}'.format(self.filename, self.args[0])


class CLTuneMismatchError(ValueError, CLTuneError):
	pass
