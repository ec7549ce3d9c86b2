"""Tests for reverse- and forward-mode differentiation."""
