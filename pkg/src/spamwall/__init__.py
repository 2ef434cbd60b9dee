"""Layered defense against spam-borne DDoS: filters, pipeline, monitor, simulator."""

__version__ = "0.1.0"
