from __future__ import annotations

"""Control-plane algorithms: policies, allocation, shaping, brokers and latency bounds."""
