"""dnsrace: race DNS queries across upstreams and judge whether the
latency saved pays for the traffic added."""

__version__ = "0.1.0"
