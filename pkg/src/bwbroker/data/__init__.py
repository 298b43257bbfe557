from __future__ import annotations

"""Wire codecs, configuration loaders and bundled scenarios."""
