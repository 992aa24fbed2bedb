from flask import Blueprint, request, jsonify, current_app

from .errors import RecsysError

admin_bp = Blueprint("admin", __name__, url_prefix="/admin")


@admin_bp.route("/reload", methods=["POST"])
def reload_snapshot():
    """
    POST /admin/reload?dir=<path>
    Loads the snapshot at `dir` (or re-resolves the directory the service started from,
    following a CURRENT pointer) and swaps it in. Requests already running finish on
    the old snapshot. 204 on success.
    """
    if not current_app.config.get("RECSYS_ADMIN_ALLOW_RELOAD", True):
        return jsonify({"error": "reload is disabled"}), 403
    target = (request.args.get("dir") or "").strip() or None
    handle = current_app.extensions["recsys"]
    try:
        fresh = handle.reload(target)
    except (RecsysError, OSError) as e:
        current_app.logger.warning("snapshot reload from %s failed: %s", target or handle.source, e)
        return jsonify({"error": "reload failed", "detail": str(e)}), 400
    except Exception as e:
        current_app.logger.exception("snapshot reload crashed")
        return jsonify({"error": "reload failed", "detail": str(e)}), 500
    current_app.logger.info("Reloaded snapshot %s", fresh.snapshot_id)
    return "", 204
