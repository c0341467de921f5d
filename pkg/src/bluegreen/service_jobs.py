"""Background job execution and durable service state.

One worker thread drains a FIFO queue, so scenario jobs never compete for
the solver. Job records and the versioned intervention set persist to a
JSON file next to the registry: a restarted service still serves finished
results, and jobs that were mid-flight are marked failed rather than
silently lost.
"""

from __future__ import annotations

import json
import os
import queue
import tempfile
import threading
from pathlib import Path
from typing import Callable

from .errors import EngineError, StaleVersionError

SCHEMA_VERSION = 1


class JobManager:
    def __init__(self, state_path: str | Path):
        self.state_path = Path(state_path)
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._state = self._load()
        self._worker = threading.Thread(target=self._loop, daemon=True,
                                        name="job-worker")
        self._worker.start()

    # -- persistence --------------------------------------------------------

    def _load(self) -> dict:
        if self.state_path.exists():
            with open(self.state_path) as f:
                state = json.load(f)
            interrupted = 0
            for job in state.get("jobs", {}).values():
                if job["status"] in ("queued", "running"):
                    job["status"] = "failed"
                    job["error"] = {"error": "Interrupted",
                                    "message": "service restarted during the run"}
                    interrupted += 1
            if interrupted:
                self._persist_locked(state)
            return state
        return {"schema_version": SCHEMA_VERSION, "next_id": 1, "jobs": {},
                "interventions": {"version": 0, "items": []}}

    def _persist_locked(self, state: dict | None = None) -> None:
        state = state if state is not None else self._state
        blob = json.dumps(state, sort_keys=True).encode()
        fd, tmp = tempfile.mkstemp(dir=self.state_path.parent,
                                   prefix=".jobs.")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(blob)
            os.replace(tmp, self.state_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    # -- jobs ----------------------------------------------------------------

    def submit(self, kind: str, params: dict, work: Callable[[], dict]) -> str:
        with self._lock:
            job_id = str(self._state["next_id"])
            self._state["next_id"] += 1
            self._state["jobs"][job_id] = {"id": job_id, "kind": kind,
                                           "params": params, "status": "queued",
                                           "result": None, "error": None}
            self._persist_locked()
        self._queue.put((job_id, work))
        return job_id

    def _loop(self) -> None:
        while True:
            job_id, work = self._queue.get()
            with self._lock:
                job = self._state["jobs"].get(job_id)
                if job is None or job["status"] != "queued":
                    continue
                job["status"] = "running"
                self._persist_locked()
            try:
                result = work()
                update = {"status": "done", "result": result}
            except EngineError as exc:
                update = {"status": "failed",
                          "error": {"error": type(exc).__name__,
                                    "message": str(exc)}}
            except Exception as exc:  # keep the worker alive no matter what
                update = {"status": "failed",
                          "error": {"error": "InternalError",
                                    "message": f"{type(exc).__name__}: {exc}"}}
            with self._lock:
                self._state["jobs"][job_id].update(update)
                self._persist_locked()

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            job = self._state["jobs"].get(job_id)
            return dict(job) if job else None

    def list_jobs(self) -> list[dict]:
        with self._lock:
            return [{"id": j["id"], "kind": j["kind"], "status": j["status"]}
                    for _, j in sorted(self._state["jobs"].items(),
                                       key=lambda kv: int(kv[0]))]

    def wait_idle(self, timeout: float = 60.0) -> None:
        """Block until the queue drains (test helper)."""
        import time
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                busy = any(j["status"] in ("queued", "running")
                           for j in self._state["jobs"].values())
            if not busy:
                return
            time.sleep(0.02)
        raise TimeoutError("jobs still running after timeout")

    # -- intervention set (compare-and-set) -----------------------------------

    def intervention_state(self) -> dict:
        with self._lock:
            iv = self._state["interventions"]
            return {"version": iv["version"], "items": list(iv["items"])}

    def cas_interventions(self, base_version: int, items: list) -> int:
        with self._lock:
            current = self._state["interventions"]["version"]
            if base_version != current:
                raise StaleVersionError(
                    f"intervention set is at version {current}, "
                    f"you edited version {base_version}; refetch and retry",
                    current_version=current)
            new_version = current + 1
            self._state["interventions"] = {"version": new_version,
                                            "items": items}
            self._persist_locked()
            return new_version
