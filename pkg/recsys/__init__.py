"""
recsys/__init__.py

Application factory for the similar-ads recommendation service.

This file:
- Loads service configuration (defaults from the environment, instance/config.py, test overrides)
- Opens the served snapshot and keeps it behind a SnapshotHandle in app.extensions["recsys"]
- create_app registers the recommendation and admin blueprints in a fault-tolerant manner
"""
import os
import logging
from flask import Flask

from flask_cors import CORS

from .config import safe_bool, safe_int
from .errors import SnapshotError
from .serve import SnapshotHandle


def create_app(test_config=None) -> Flask:
    """
    Application factory.

    Example usage:
        export RECSYS_SNAPSHOT_DIR=./out      # refresh output dir (CURRENT pointer) or a snapshot dir
        flask --app recsys run

    The function raises RuntimeError if RECSYS_SNAPSHOT_DIR is not configured via
    environment variable or instance/config.py, or if it holds no valid snapshot.
    Tests may pass a ready Snapshot object as RECSYS_SNAPSHOT.
    """
    app = Flask(__name__, instance_relative_config=True)

    # Basic defaults (can be overridden by instance/config.py or test_config)
    app.config.from_mapping(
        RECSYS_SNAPSHOT_DIR=os.environ.get("RECSYS_SNAPSHOT_DIR"),
        RECSYS_DEFAULT_COUNT=safe_int(os.environ.get("RECSYS_DEFAULT_COUNT"), 6),
        RECSYS_MAX_COUNT=safe_int(os.environ.get("RECSYS_MAX_COUNT"), 100),
        RECSYS_ADMIN_ALLOW_RELOAD=safe_bool(os.environ.get("RECSYS_ADMIN_ALLOW_RELOAD"), True),
    )

    # Load instance config (local override, kept out of VCS)
    app.config.from_pyfile("config.py", silent=True)

    if test_config:
        app.config.update(test_config)

    snapshot = app.config.get("RECSYS_SNAPSHOT")
    snapshot_dir = app.config.get("RECSYS_SNAPSHOT_DIR")
    if snapshot is not None:
        handle = SnapshotHandle(snapshot, None)
    elif not snapshot_dir:
        raise RuntimeError(
            "RECSYS_SNAPSHOT_DIR is not set. Configure it in the environment or instance/config.py. "
            "Example: RECSYS_SNAPSHOT_DIR=./out (a refresh output directory)"
        )
    else:
        try:
            handle = SnapshotHandle.open(snapshot_dir)
        except (SnapshotError, ValueError, OSError) as e:
            raise RuntimeError(f"RECSYS_SNAPSHOT_DIR={snapshot_dir} holds no valid snapshot: {e}") from e
    app.extensions["recsys"] = handle

    CORS(app)

    # Register recommendation routes (/recommendations, /healthz)
    try:
        from .routes_recommendations import bp as recommendations_bp
        app.register_blueprint(recommendations_bp)
    except Exception as e:
        app.logger.exception("Failed to register recommendations blueprint: %s", e)

    # Register admin routes (snapshot reload); blueprint defines url_prefix="/admin"
    try:
        from .routes_admin import admin_bp
        app.register_blueprint(admin_bp)
    except Exception as e:
        app.logger.debug(f"Failed to register admin blueprint: {e}")

    with app.app_context():
        app.logger.debug("Serving snapshot %s (%d items)",
                         handle.snapshot.snapshot_id, len(handle.snapshot))
        try:
            app.logger.debug("Registered routes:")
            for rule in app.url_map.iter_rules():
                app.logger.debug(f"{rule} -> methods={sorted(rule.methods)}")
        except Exception:
            pass

    # If no logging handlers attached (e.g., running via "flask run"), set a basic configuration
    if not app.logger.handlers:
        logging.basicConfig(level=logging.INFO)

    return app
