import pytest

from inventory import Inventory


def test_add_accumulates():
    inv = Inventory()
    inv.add("bolt", 0.5, 10)
    inv.add("bolt", 0.6, 5)
    assert inv.quantity("bolt") == 15


def test_add_rejects_non_positive():
    with pytest.raises(ValueError):
        Inventory().add("nut", 0.1, 0)


def test_unknown_item_has_zero_quantity():
    assert Inventory().quantity("washer") == 0
