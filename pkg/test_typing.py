from hypothesis import given
from hypothesis.strategies import booleans, dictionaries, floats, integers, \
                                  lists, none, text
from json import loads
from pytest import raises  # type: ignore
from typing import Callable, Dict, List, Optional, Type, TypeVar, \
                   no_type_check

from cltune.errors import CLTuneDecodeError
from cltune.typing import Choice, Member, Object, Value, _compose, \
                          canonical, digest, for_json, json_to, jsontype, \
                          member, optionalmember


def test_forjson():
	with raises(TypeError, match='not a JSON value'):
		for_json(NotImplementedError())
	with raises(ValueError, match='not a finite number'):
		for_json(float('nan'))

D = TypeVar('D', bound='DuckValue')

class SubclassValue(Value):
	pass

class DuckValue(object):
	def for_json(self) -> object:
		pass

	@staticmethod
	def json_to(cls: Type[D], datum: object) -> D:
		pass

class DuckNoValue(DuckValue):
	json_to = None

def test_Value_subclasshook():
	assert not issubclass(int, Value)
	assert issubclass(SubclassValue, Value)
	assert issubclass(DuckValue, Value)
	assert not issubclass(DuckNoValue, Value)

class Colour(Choice):
	RED  = 'red'
	BLUE = 'blue'

def test_Choice():
	assert Colour.json_to('red') is Colour.RED
	assert Colour.BLUE.for_json() == 'blue'
	assert str(Colour.BLUE) == 'blue'
	assert repr(Colour.RED) == 'Colour.RED'
	with raises(CLTuneDecodeError, match="not a known colour: 'green'"):
		Colour.json_to('green')
	with raises(CLTuneDecodeError, match='not a string'):
		Colour.json_to(1)

@given(booleans())
def test_bool_jsonto(b):
	assert json_to(bool)(b) == b
	with raises(CLTuneDecodeError, match='not a boolean'):
		json_to(bool)(1)

@given(integers())
def test_int_jsonto(i):
	assert json_to(int)(i) == i
	with raises(CLTuneDecodeError, match='not an integer'):
		# False and True are tricky, because issubclass(bool, int)
		json_to(int)(False)
	with raises(CLTuneDecodeError, match='not an integer'):
		json_to(int)(1.5)

@given(floats(allow_nan=False, allow_infinity=False) |
       integers(min_value=-2**53, max_value=2**53))
def test_float_jsonto(x):
	assert json_to(float)(x) == x
	assert isinstance(json_to(float)(x), float)

def test_float_jsonto_invalid():
	with raises(CLTuneDecodeError, match='not a number'):
		json_to(float)(True)
	with raises(CLTuneDecodeError, match='not a number'):
		json_to(float)('1e4')
	with raises(CLTuneDecodeError, match='not a finite number'):
		json_to(float)(float('inf'))

@given(text())
def test_str_jsonto(s):
	assert json_to(str)(s) == s
	with raises(CLTuneDecodeError, match='not a string'):
		json_to(str)(57)

@given(none() | integers())
def test_optional_jsonto(o):
	assert json_to(Optional[int])(o) == o

@given(lists(integers()))
def test_list_jsonto(l):
	assert json_to(List[int])(l) == l
	with raises(CLTuneDecodeError, match='not an array'):
		json_to(List[int])({})
	with raises(CLTuneDecodeError, match='not an integer'):
		json_to(List[int])([False])
	with raises(TypeError, match='no element type specified'):
		json_to(list)(l)

@given(dictionaries(text(), integers()))
def test_dict_jsonto(d):
	assert json_to(Dict[str, int])(d) == d
	with raises(CLTuneDecodeError, match='not an object'):
		json_to(Dict[str, int])([])
	with raises(CLTuneDecodeError, match='not a string'):
		json_to(Dict[str, int])({42: 57})
	with raises(TypeError, match='no value type specified'):
		json_to(dict)(d)

def test_jsontype():
	assert jsontype(int) == (json_to(int), for_json)

@given(integers())
def test_compose(i):
	assert _compose(lambda x: x+1, lambda x: 2*x)(i) == 2*i + 1

class SubclassMember(Member):
	pass

class DuckMember(object):
	def __set_name__(self, _type: Type['Object'], _name: str) -> None:
		pass
	def push(self, push: Callable[[str, object], None], value: set) -> None:
		pass
	def pop(self, pop: Callable[[str], object]) -> set:
		pass

def test_Member_subclass():
	assert issubclass(SubclassMember, Member)
	assert not issubclass(DuckMember, Member)

class Layer(Object):
	width:  member[int]            = member('width')
	kind:   member[Colour]         = member('kind')
	scale:  optionalmember[float]  = optionalmember('scale', default=1.0)
	note:   optionalmember[str]    = optionalmember('note')

class Stack(Object):
	name:   member[str]              = member('name')
	layers: member[List[Layer]]      = member('layers')
	extra:  member[Dict[str, Layer]] = member('extra')

@no_type_check
def test_member_notype():
	with raises(TypeError, match='no type or conversions specified'):
		class Failing(Layer):  # pylint: disable=unused-variable
			bad = member('bad')

@given(integers(), floats(allow_nan=False, allow_infinity=False))
def test_Object_forjson_jsonto(i, x):
	layer = Layer(width=i, kind=Colour.RED, scale=x)
	assert layer.for_json() == {'width': i, 'kind': 'red', 'scale': x}
	assert Layer.json_to(layer.for_json()) == layer

def test_Object_nested():
	stack = Stack(name='s', layers=[Layer(width=2, kind=Colour.BLUE)],
	              extra={'top': Layer(width=3, kind=Colour.RED,
	                                  note='n')})
	datum = {'name': 's',
	         'layers': [{'width': 2, 'kind': 'blue', 'scale': 1.0}],
	         'extra': {'top': {'width': 3, 'kind': 'red', 'scale': 1.0,
	                           'note': 'n'}}}
	assert stack.for_json() == datum
	assert Stack.json_to(datum) == stack

def test_Object_jsonto_invalid():
	with raises(CLTuneDecodeError, match='not an object'):
		Layer.json_to([])
	with raises(CLTuneDecodeError, match="no member 'width'"):
		Layer.json_to({'kind': 'red'})
	with raises(CLTuneDecodeError, match="extra member 'widht'"):
		Layer.json_to({'width': 1, 'kind': 'red', 'widht': 2})
	with raises(CLTuneDecodeError, match='width: not an integer'):
		Layer.json_to({'width': 'wide', 'kind': 'red'})
	with raises(CLTuneDecodeError, match='layers: width: not an integer'):
		Stack.json_to({'name': 's', 'extra': {},
		               'layers': [{'width': None, 'kind': 'red'}]})

def test_optionalmember_default():
	layer = Layer.json_to({'width': 1, 'kind': 'blue'})
	assert layer.scale == 1.0 and layer.note is None
	assert 'note' not in layer.for_json()

def test_Object_repr_eq():
	layer = Layer(width=1, kind=Colour.RED)
	assert repr(layer) == ("Layer(width=1, kind=Colour.RED, scale=1.0, "
	                       "note=None)")
	assert layer == Layer(width=1, kind=Colour.RED, scale=1.0)
	assert layer != Layer(width=2, kind=Colour.RED)
	assert layer != Ellipsis

def test_Object_replace():
	layer = Layer(width=1, kind=Colour.RED)
	wider = layer.replace(width=4)
	assert wider.width == 4 and wider.kind is Colour.RED
	assert layer.width == 1

def test_canonical():
	layer = Layer(width=1, kind=Colour.RED, note='é')
	text_ = canonical(layer)
	assert text_ == ('{"kind":"red","note":"\\u00e9","scale":1.0,'
	                 '"width":1}')
	assert loads(text_) == layer.for_json()

def test_digest():
	a = digest({'b': 1, 'a': [1.5, 'x']})
	assert a == digest({'a': [1.5, 'x'], 'b': 1})
	assert len(a) == 64 and all(c in '0123456789abcdef' for c in a)
	assert a != digest({'a': [1.5, 'x'], 'b': 2})
