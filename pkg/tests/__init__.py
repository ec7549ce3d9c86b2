"""Test package for romcontrol."""
