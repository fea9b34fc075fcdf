"""Items and the inventory that tracks them."""


class Item:
    def __init__(self, name, price, quantity):
        self.name = name
        self.price = price
        self.quantity = quantity


class Inventory:
    """Tracks items by name."""

    def __init__(self):
        self._items = {}

    def add(self, name, price, quantity=1):
        if quantity <= 0:
            raise ValueError("quantity must be positive")
        item = self._items.get(name)
        if item is None:
            self._items[name] = Item(name, price, quantity)
        else:
            item.quantity += quantity
            item.price = price

    def quantity(self, name):
        item = self._items.get(name)
        return 0 if item is None else item.quantity

    def remove(self, name, quantity=1):
        """Take quantity units out; drop the item when none remain. Returns what is left."""
        item = self._items.get(name)
        if item is None:
            raise KeyError(name)
        if quantity >= item.quantity:
            del self._items[name]
            return 0
        item.quantity -= quantity
        return item.quantity

    def restock(self, threshold, amount):
        """Add amount units to every item with fewer than threshold units.

        Returns the names of the restocked items, sorted.
        """
        raise NotImplementedError("restock is not implemented yet")
