"""Tests for the romcontrol package."""
