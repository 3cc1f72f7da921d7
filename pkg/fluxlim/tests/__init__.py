"""Tests for fluxlim."""
