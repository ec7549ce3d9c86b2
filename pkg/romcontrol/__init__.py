#!/usr/bin/env python3
"""Learned control fields over reduced-order model parameters for evolution PDEs."""
