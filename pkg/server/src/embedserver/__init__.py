"""Reference embedding server for the tripletground wire protocol."""

from .app import ServerConfig, build_app

__version__ = "0.1.0"
