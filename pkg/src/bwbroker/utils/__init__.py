from __future__ import annotations

"""Bandwidth units and default constants."""
