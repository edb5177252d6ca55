"""Battery SOH indicator extraction and capacity-fade estimation toolkit."""

__version__ = "0.1.0"
SCHEMA_VERSION = "1"
