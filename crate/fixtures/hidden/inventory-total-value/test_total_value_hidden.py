from inventory import Inventory


def test_total_value():
    inv = Inventory()
    inv.add("bolt", 2.0, 3)
    inv.add("nut", 1.5, 2)
    assert inv.total_value() == 9.0


def test_removed_items_do_not_count():
    inv = Inventory()
    inv.add("bolt", 2.0, 3)
    inv.remove("bolt", 3)
    assert inv.total_value() == 0
