from .app import LiveOptions, ReplayOptions, create_app

__all__ = ["LiveOptions", "ReplayOptions", "create_app"]
