import json
import logging
import datetime
import threading
from pathlib import Path

from fissionserve.utils_errors import DuplicateAppError, NotFoundError
from fissionserve.utils_tasks import AppManifest

logger = logging.getLogger("FissionServe")


def _utc_now():
    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class AppRegistry:
    """Registered app manifests, optionally persisted to a JSON file.

    One writer at a time; readers get copies.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.RLock()
        self._data = []
        if self.path is not None and self.path.exists():
            self._data = json.loads(self.path.read_text())
            logger.info("Loaded %d app manifests from %s", len(self._data), self.path)

    def _save(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self._data, indent=2))

    def has_app(self, app_id):
        """Check if an app with this id is registered."""
        with self._lock:
            return any(r["app_id"] == app_id for r in self._data)

    def app_ids(self):
        with self._lock:
            return [r["app_id"] for r in self._data]

    def insert(self, manifest):
        """Store a manifest; app ids are unique."""
        with self._lock:
            if self.has_app(manifest.app_id):
                raise DuplicateAppError(f"duplicate app {manifest.app_id!r}")
            self._data.append({"app_id": manifest.app_id, "registered": _utc_now(), "manifest": manifest.to_dict()})
            self._save()

    def remove(self, app_id):
        with self._lock:
            for index, record in enumerate(self._data):
                if record["app_id"] == app_id:
                    del self._data[index]
                    self._save()
                    return True
        raise NotFoundError(f"unknown app {app_id!r}")

    def get(self, app_id):
        with self._lock:
            for record in self._data:
                if record["app_id"] == app_id:
                    return AppManifest.from_dict(record["manifest"])
        raise NotFoundError(f"unknown app {app_id!r}")

    def manifests(self):
        """All stored manifests in registration order."""
        with self._lock:
            records = list(self._data)
        return [AppManifest.from_dict(r["manifest"]) for r in records]

    def find(self, registered_gte=None):
        """Query registry records by optional registration time."""
        with self._lock:
            results = [dict(r) for r in self._data]
        if registered_gte is not None:
            results = [r for r in results if r["registered"] >= registered_gte]
        return results
