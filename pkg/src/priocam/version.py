"""Package version, importable without touching the package root."""

VERSION = "0.1.0"
SCHEMA_VERSION = 1
