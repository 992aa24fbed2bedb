# Similar-ads endpoints: top-k recommendations for an item and a health probe
from flask import Blueprint, Response, request, jsonify, current_app

from .config import safe_int
from .errors import UnknownItemError
from .serve import recommend

bp = Blueprint("recommendations", __name__)


def _wants_json() -> bool:
    best = request.accept_mimetypes.best_match(["text/plain", "application/json"])
    return best == "application/json"


@bp.route("/recommendations/<path:item_id>", methods=["GET"])
def get_recommendations(item_id):
    """
    GET /recommendations/<item_id>?count=6
    Returns text/plain, one "item_id<TAB>score" line per result (best first).
    With "Accept: application/json":
    {
      "snapshot_id": "...",
      "item_id": "<query>",
      "items": [ {"item_id": "...", "score": 0.93}, ... ]
    }
    404 if the item is not in the served snapshot.
    """
    # one snapshot per request, even if a reload swaps the handle meanwhile
    snapshot = current_app.extensions["recsys"].snapshot
    count = safe_int(request.args.get("count"), current_app.config["RECSYS_DEFAULT_COUNT"])
    if count < 1:
        return jsonify({"error": "count must be >= 1"}), 400
    count = min(count, current_app.config["RECSYS_MAX_COUNT"])
    try:
        results = recommend(snapshot, item_id, count)
    except UnknownItemError as e:
        if _wants_json():
            return jsonify({"error": str(e)}), 404
        return Response(f"{e}\n", status=404, mimetype="text/plain")
    except Exception as e:
        current_app.logger.exception("recommend failed for %s", item_id)
        return jsonify({"error": "recommendation failed", "detail": str(e)}), 500

    headers = {"X-Snapshot-Id": snapshot.snapshot_id}
    if _wants_json():
        resp = jsonify({
            "snapshot_id": snapshot.snapshot_id,
            "item_id": item_id,
            "items": [{"item_id": i, "score": s} for i, s in results],
        })
        resp.headers.update(headers)
        return resp
    body = "".join(f"{i}\t{s:.6f}\n" for i, s in results)
    return Response(body, status=200, mimetype="text/plain", headers=headers)


@bp.route("/healthz", methods=["GET"])
def healthz():
    snapshot = current_app.extensions["recsys"].snapshot
    return Response(f"{snapshot.snapshot_id}\n", status=200, mimetype="text/plain")
