"""Content-addressed file storage with a gas-metered CID registry and a
lightweight hash-linked chain for tamper verification."""

__version__ = "0.1.0"
