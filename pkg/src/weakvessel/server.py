"""HTTP service backing the browser annotator.

Serves volume listings, windowed slice renderings, per-slice grids, and
tag read/write with optimistic versioning (If-Match). Writes to one
(volume, slice) are serialized; reads are unrestricted. The service never
modifies volume pixels.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .tags import PatchTagSet, SliceTags, load_tags, save_tags
from .volume import Volume, compute_brain_mask, load_volume, make_grid, mask_bbox_2d


class VolumeStore:
    """Lazy volume/grid/tag cache over a data directory."""

    def __init__(self, data_dir: Path, tags_dir: Path, patch_size: int = 32):
        self.data_dir = Path(data_dir)
        self.tags_dir = Path(tags_dir)
        self.patch_size = patch_size
        self._volumes: dict[str, Volume] = {}
        self._masks: dict[str, np.ndarray] = {}
        self._tags: dict[str, PatchTagSet] = {}
        self._versions: dict[tuple[str, int], int] = {}
        self._locks: dict[tuple[str, int], threading.Lock] = {}
        self._lock = threading.Lock()

    def volume_paths(self) -> dict[str, Path]:
        out = {}
        for pattern in ("*.nii", "*.nii.gz", "*.f32"):
            for p in sorted(self.data_dir.glob(pattern)):
                name = p.name
                if "_label" in name or "_pseudo" in name:
                    continue
                vid = name.split(".")[0]
                out[vid] = p
        return out

    def get_volume(self, vid: str) -> Volume:
        if vid not in self._volumes:
            paths = self.volume_paths()
            if vid not in paths:
                raise KeyError(vid)
            self._volumes[vid] = load_volume(paths[vid])
        return self._volumes[vid]

    def get_mask(self, vid: str) -> np.ndarray:
        if vid not in self._masks:
            self._masks[vid] = compute_brain_mask(self.get_volume(vid))
        return self._masks[vid]

    def get_grid(self, vid: str, s: int):
        v = self.get_volume(vid)
        bbox = mask_bbox_2d(self.get_mask(vid)[:, :, s])
        if bbox is None:
            return None
        return make_grid(v.shape[:2], bbox, self.patch_size, slice_index=s)

    def tag_path(self, vid: str) -> Path:
        return self.tags_dir / f"{vid}_tags.json"

    def get_tags(self, vid: str) -> PatchTagSet:
        if vid not in self._tags:
            path = self.tag_path(vid)
            if path.exists():
                self._tags[vid] = load_tags(path)
            else:
                self.get_volume(vid)  # 404 for unknown ids
                self._tags[vid] = PatchTagSet(volume_id=vid, patch_size=self.patch_size)
        return self._tags[vid]

    def slice_lock(self, vid: str, s: int) -> threading.Lock:
        with self._lock:
            return self._locks.setdefault((vid, s), threading.Lock())

    def version(self, vid: str, s: int) -> int:
        return self._versions.get((vid, s), 0)

    def bump_version(self, vid: str, s: int) -> int:
        self._versions[(vid, s)] = self.version(vid, s) + 1
        return self._versions[(vid, s)]


class SessionStore:
    def __init__(self):
        self._sessions: dict[str, dict] = {}
        self._lock = threading.Lock()

    def create(self, volume_id: str, rater_id: str) -> dict:
        sid = uuid.uuid4().hex[:12]
        now = time.time()
        with self._lock:
            self._sessions[sid] = {
                "session_id": sid,
                "volume_id": volume_id,
                "rater_id": rater_id,
                "cursor": 0,
                "created_at": now,
                "updated_at": now,
                "slices_annotated": [],
            }
            return dict(self._sessions[sid])

    def touch(self, sid: str, slice_index: int) -> None:
        with self._lock:
            sess = self._sessions.get(sid)
            if sess is None:
                return
            sess["cursor"] = slice_index
            sess["updated_at"] = max(sess["updated_at"], time.time())
            if slice_index not in sess["slices_annotated"]:
                sess["slices_annotated"].append(slice_index)

    def get(self, sid: str) -> dict | None:
        with self._lock:
            sess = self._sessions.get(sid)
            return None if sess is None else dict(sess)


def create_app(data_dir, tags_dir, patch_size: int = 32, token: str | None = None) -> FastAPI:
    store = VolumeStore(Path(data_dir), Path(tags_dir), patch_size=patch_size)
    sessions = SessionStore()
    app = FastAPI(title="weakvessel annotation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.store = store

    def check_auth(request: Request) -> None:
        if token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="invalid or missing token")

    def get_volume_or_404(vid: str) -> Volume:
        try:
            return store.get_volume(vid)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown volume {vid!r}")

    @app.get("/api/volumes")
    def list_volumes(request: Request):
        check_auth(request)
        out = []
        for vid in sorted(store.volume_paths()):
            v = store.get_volume(vid)
            out.append({
                "id": vid,
                "shape": list(v.shape),
                "spacing": list(v.spacing),
                "n_slices": v.n_slices,
                "intensity_min": float(v.data.min()),
                "intensity_max": float(v.data.max()),
            })
        return out

    @app.get("/api/volumes/{vid}/slices/{s}.png")
    def slice_png(vid: str, s: int, request: Request,
                  min: float | None = Query(default=None), max: float | None = Query(default=None)):
        check_auth(request)
        v = get_volume_or_404(vid)
        if not 0 <= s < v.n_slices:
            raise HTTPException(status_code=404, detail="slice out of range")
        sl = v.slice(s).astype(np.float32)
        lo = float(v.data.min()) if min is None else min
        hi = float(v.data.max()) if max is None else max
        if hi <= lo:
            hi = lo + 1.0
        img = np.clip((sl - lo) / (hi - lo), 0.0, 1.0)
        buf = io.BytesIO()
        Image.fromarray((img * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/volumes/{vid}/slices/{s}/grid")
    def slice_grid(vid: str, s: int, request: Request):
        check_auth(request)
        v = get_volume_or_404(vid)
        if not 0 <= s < v.n_slices:
            raise HTTPException(status_code=404, detail="slice out of range")
        grid = store.get_grid(vid, s)
        if grid is None:
            return {"slice_index": s, "patch_size": store.patch_size, "offsets": [],
                    "slice_shape": list(v.shape[:2]), "empty": True}
        return {**grid.to_dict(), "empty": False}

    @app.get("/api/volumes/{vid}/slices/{s}/tags")
    def get_tags(vid: str, s: int, request: Request, response: Response):
        check_auth(request)
        get_volume_or_404(vid)
        tags = store.get_tags(vid)
        version = store.version(vid, s)
        cells = tags.tagged_cells(s) if s in tags.slices else []
        response.headers["ETag"] = str(version)
        return {"volume_id": vid, "slice": s, "tags": cells, "version": version}

    @app.put("/api/volumes/{vid}/slices/{s}/tags")
    def put_tags(vid: str, s: int, body: dict, request: Request, response: Response,
                 if_match: str | None = Header(default=None),
                 session: str | None = Query(default=None)):
        check_auth(request)
        v = get_volume_or_404(vid)
        if not 0 <= s < v.n_slices:
            raise HTTPException(status_code=404, detail="slice out of range")
        if if_match is None:
            raise HTTPException(status_code=428, detail="If-Match header required")
        if "tags" not in body or not isinstance(body["tags"], list):
            raise HTTPException(status_code=422, detail="body must carry a 'tags' list")
        lock = store.slice_lock(vid, s)
        with lock:
            current = store.version(vid, s)
            if if_match != str(current):
                raise HTTPException(
                    status_code=409,
                    detail={"message": "version conflict", "current_version": current,
                            "current_tags": store.get_tags(vid).tagged_cells(s)
                            if s in store.get_tags(vid).slices else []},
                )
            grid = store.get_grid(vid, s)
            if grid is None:
                raise HTTPException(status_code=422, detail="slice has no annotatable region")
            bits = np.zeros(grid.n_cells, dtype=bool)
            for i in body["tags"]:
                if not isinstance(i, int) or not 0 <= i < grid.n_cells:
                    raise HTTPException(status_code=422, detail=f"cell index {i} out of range")
                bits[i] = True
            tags = store.get_tags(vid)
            tags.slices[s] = SliceTags(grid=grid, tags=bits)
            save_tags(tags, store.tag_path(vid))
            version = store.bump_version(vid, s)
        if session:
            sessions.touch(session, s)
        response.headers["ETag"] = str(version)
        return {"volume_id": vid, "slice": s, "tags": sorted(int(i) for i in body["tags"]),
                "version": version}

    @app.post("/api/sessions")
    def create_session(body: dict, request: Request):
        check_auth(request)
        vid = body.get("volume_id")
        if not vid:
            raise HTTPException(status_code=422, detail="volume_id required")
        get_volume_or_404(vid)
        return sessions.create(vid, body.get("rater_id", "anonymous"))

    @app.get("/api/sessions/{sid}/progress")
    def session_progress(sid: str, request: Request):
        check_auth(request)
        sess = sessions.get(sid)
        if sess is None:
            raise HTTPException(status_code=404, detail="unknown session")
        v = store.get_volume(sess["volume_id"])
        done = len(sess["slices_annotated"])
        return {
            "session_id": sid,
            "volume_id": sess["volume_id"],
            "rater_id": sess["rater_id"],
            "cursor": sess["cursor"],
            "slices_annotated": done,
            "n_slices": v.n_slices,
            "complete": done >= v.n_slices,
            "created_at": sess["created_at"],
            "updated_at": sess["updated_at"],
        }

    return app
