from __future__ import annotations

"""Deterministic packet-level and fluid network simulation."""
