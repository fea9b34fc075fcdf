"""A minimal stock keeper."""

from inventory.store import Inventory, Item

__all__ = ["Inventory", "Item"]
