"""Standalone HTTP service for the paste-integration wire protocol.

The package deliberately does not import ctxforge.  Both sides implement
the same documented wire format, so a codec bug on either end shows up
as a protocol failure in tests instead of cancelling out.
"""

from ctxforge_service.app import create_app, main

__version__ = "0.1.0"

__all__ = ["create_app", "main", "__version__"]
