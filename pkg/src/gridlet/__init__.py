"""gridlet: replica catalog, WAN transfer and multi-cluster job brokering
against simulated cluster gateways."""

__version__ = "0.1.0"
