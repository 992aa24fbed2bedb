"""
check_routes.py

Print the URL map of the recommender service and the snapshot it would serve.

Usage:
  export RECSYS_SNAPSHOT_DIR=./local-out
  python scripts/check_routes.py [snapshot_or_output_dir]
"""
import sys

from recsys import create_app

overrides = {"RECSYS_SNAPSHOT_DIR": sys.argv[1]} if len(sys.argv) > 1 else None
app = create_app(overrides)
with app.app_context():
    snapshot = app.extensions["recsys"].snapshot
    print(f"snapshot {snapshot.snapshot_id}: {len(snapshot.item_ids)} items, "
          f"{len(snapshot.active_ids())} active")
    for rule in sorted(app.url_map.iter_rules(), key=lambda r: r.rule):
        methods = ','.join(sorted([m for m in rule.methods if m not in ('HEAD', 'OPTIONS')]))
        print(f"{rule.rule:40}  -> endpoint={rule.endpoint:40}  methods={methods}")
