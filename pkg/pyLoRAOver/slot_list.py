import operator

import numpy as np

from .aux_functions import getattr_nest
from .exceptions import ParameterInvalid


class SlotList(list):
    """
    List of adapter slots with query helpers.

    Slots are kept in the deterministic (layer, role, half) order, and
    filtered lists keep it.
    """
    _lookups = {
        'eq': operator.eq, 'ne': operator.ne, 'lt': operator.lt,
        'gt': operator.gt, 'le': operator.le, 'ge': operator.ge,
        'range': lambda value, bounds: bounds[0] <= value <= bounds[1],
        'in': lambda value, choices: value in choices,
        'startswith': lambda value, prefix: str(value).startswith(prefix),
        'endswith': lambda value, suffix: str(value).endswith(suffix),
        'isnone': lambda value, flag: (value is None) == flag,
    }

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for item in self:
            self._validate_type(item)

    def __repr__(self):
        return '[ ' + ',\n'.join([x.__repr__() for x in self]) + ' ]'

    @staticmethod
    def _validate_type(__object):
        if not hasattr(__object, 'slot_id'):
            raise ParameterInvalid(f'Invalid type "{__object.__class__.__name__}". Only adapter slots allowed in list.')

    def __getitem__(self, item):
        if isinstance(item, slice):
            return SlotList(super().__getitem__(item))
        return super().__getitem__(item)

    def copy(self):
        return SlotList(self)

    def append(self, __object) -> None:
        self._validate_type(__object)
        if self.get(__object.slot_id) is not None:
            raise ParameterInvalid(f'Duplicated slot "{__object.slot_id}".')
        super().append(__object)

    def extend(self, __iterable) -> None:
        for __object in __iterable:
            self.append(__object)

    @property
    def ids(self):
        """Slot ids in list order"""
        return [x.slot_id for x in self]

    def get(self, slot_id):
        """Return the slot with the given id, or None"""
        for x in self:
            if x.slot_id == slot_id:
                return x
        return None

    @classmethod
    def _meet_lookup_criteria(cls, slot, attr_list, op, lookup_value):
        return cls._lookups[op](getattr_nest(slot, attr_list), lookup_value)

    def filter(self, **kwargs):
        """Filter slots that match the given criteria.

        The keywords are slot attributes, optionally followed by __ and one of
        the lookups eq, ne, lt, gt, le, ge, range, in, startswith, endswith,
        isnone, e.g.:
        slots.filter(role='proj', half='A') -> A halves of every proj matrix
        slots.filter(layer__lt=2) -> slots of the first two layers
        slots.filter(factored=True) -> over-parameterized slots
        """
        filtered_list = list(self)
        for kw in kwargs:
            lookups = kw.split('__')
            if lookups[-1] in self._lookups:
                op, attr_list = lookups[-1], lookups[:-1]
            else:
                op, attr_list = 'eq', lookups
            filtered_list = [slot for slot in filtered_list if
                             self._meet_lookup_criteria(slot, attr_list, op, kwargs[kw])]
        return SlotList(filtered_list)

    def count(self, __value=None) -> int:
        """Number of occurrences of value, or the list length if value is not specified"""
        if __value is None:
            return len(self)
        return super().count(__value)

    def sum(self, attr: str):
        """Sum of the values of the attribute, 0 for an empty list"""
        if len(self) == 0:
            return 0
        return np.array([getattr_nest(x, attr.split('__')) for x in self]).sum().item()
