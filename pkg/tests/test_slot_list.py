import numpy as np
import pytest

from pyLoRAOver.adapters import AdapterSlot
from pyLoRAOver.exceptions import ParameterInvalid
from pyLoRAOver.slot_list import SlotList


@pytest.fixture
def slots():
    ids = [f'layer{layer}.{role}.{half}' for layer in range(3) for role in ('ffn', 'proj') for half in 'AB']
    return SlotList(AdapterSlot(slot_id, np.ones((2, 3)) * k) for k, slot_id in enumerate(ids))


def test_rejects_non_slots():
    with pytest.raises(ParameterInvalid):
        SlotList([1, 2])


def test_rejects_duplicates(slots):
    with pytest.raises(ParameterInvalid):
        slots.append(AdapterSlot('layer0.ffn.A', np.ones((2, 3))))


def test_get(slots):
    assert slots.get('layer1.proj.B').layer == 1
    assert slots.get('layer9.proj.B') is None


def test_filter(slots):
    assert slots.filter(role='proj', half='A').ids == ['layer0.proj.A', 'layer1.proj.A', 'layer2.proj.A']
    assert slots.filter(layer__lt=1).count() == 4
    assert slots.filter(layer__range=(1, 2), half='B').count() == 4
    assert slots.filter(slot_id__in=['layer0.ffn.A', 'layer2.ffn.B']).count() == 2
    assert slots.filter(slot_id__endswith='.A').count() == 6
    assert slots.filter(plan__isnone=True).count() == 12


def test_filter_keeps_order(slots):
    assert slots.filter(half='B').ids == [x for x in slots.ids if x.endswith('.B')]
    assert slots.filter(role='attn') == []


def test_sum(slots):
    assert slots.sum('n_params') == 72
    assert SlotList().sum('n_params') == 0


def test_slicing_keeps_type(slots):
    assert isinstance(slots[:2], SlotList)
