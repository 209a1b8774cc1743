"""Web service for the pairwise realism study.

Raters see two colorizations of the same sketch — one from the baseline
model, one from ours — at randomized left/right positions, and pick the more
realistic one. The client payload carries only opaque tokens; which model
produced which image exists solely in the server-side vote log, so nothing a
participant can inspect reveals the mapping.

Content directory layout (written by ``survey-export``):
    {content_root}/{dataset}/baseline/{stem}.png
    {content_root}/{dataset}/ours/{stem}.png
Pairs share a stem. Votes append to a JSON-lines log, one record per line.
"""

from __future__ import annotations

import hashlib
import json
import random
import secrets
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import FileResponse
from pydantic import BaseModel

from .edges import IMAGE_EXTENSIONS

MODELS = ("baseline", "ours")
SIDES = ("left", "right")
SESSION_COOKIE = "survey_session"


@dataclass(frozen=True)
class VoteRecord:
    pair_id: str
    dataset: str
    left_model: str
    right_model: str
    chosen_side: str
    session: str
    timestamp: float

    def __post_init__(self):
        if self.left_model == self.right_model:
            raise ValueError("a pair must show two different models")
        if self.chosen_side not in SIDES:
            raise ValueError(f"chosen_side must be one of {SIDES}")

    @property
    def chosen_model(self) -> str:
        return self.left_model if self.chosen_side == "left" else self.right_model


class VoteLog:
    """Append-only JSON-lines store; one writer lock serializes appends."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: VoteRecord) -> None:
        line = json.dumps(asdict(record), sort_keys=True)
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(line + "\n")
                fh.flush()

    def records(self) -> list[VoteRecord]:
        if not self.path.is_file():
            return []
        out = []
        with self._lock:
            lines = self.path.read_text().splitlines()
        for line in lines:
            if line.strip():
                out.append(VoteRecord(**json.loads(line)))
        return out


def aggregate_results(records: list[VoteRecord]) -> dict:
    """Per-dataset preference percentages, resolved through stored sides.

    Only the model identity of the chosen image matters, so permuting
    left/right assignments never changes the outcome. Datasets with zero
    votes are omitted from the table and listed under ``no_votes``.
    """
    counts: dict[str, dict[str, int]] = {}
    for record in records:
        per_model = counts.setdefault(record.dataset, {m: 0 for m in MODELS})
        per_model[record.chosen_model] += 1
    table = {}
    for dataset, per_model in sorted(counts.items()):
        total = sum(per_model.values())
        table[dataset] = {
            "votes": total,
            "ours_pct": 100.0 * per_model["ours"] / total,
            "baseline_pct": 100.0 * per_model["baseline"] / total,
        }
    return {"datasets": table, "total_votes": len(records)}


# --------------------------------------------------------------------------
# Pair serving
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairInfo:
    pair_id: str
    dataset: str
    stem: str
    left_model: str
    right_model: str


class PairPool:
    """Scans the content directory and deals pairs without replacement per
    session. All mutation happens under one lock; the RNG is owned here, so a
    fixed seed reproduces the exact same deal sequence."""

    def __init__(self, content_root: str | Path, seed: int | None = None):
        self.content_root = Path(content_root)
        self.rng = random.Random(seed)
        self._lock = threading.Lock()
        self.stems = self._scan()
        self.pairs: dict[str, PairInfo] = {}
        self.served: dict[str, set[tuple[str, str]]] = {}  # session -> (dataset, stem)
        self.voted: set[tuple[str, str]] = set()           # (pair_id, session)
        self._tokens: dict[str, Path] = {}
        self._token_salt = f"{self.rng.getrandbits(64):016x}"
        self._counter = 0

    def _scan(self) -> dict[str, list[str]]:
        stems: dict[str, list[str]] = {}
        if not self.content_root.is_dir():
            return stems
        for dataset_dir in sorted(self.content_root.iterdir()):
            if not dataset_dir.is_dir():
                continue
            per_model = []
            for model in MODELS:
                model_dir = dataset_dir / model
                if not model_dir.is_dir():
                    break
                per_model.append({p.stem: p for p in model_dir.iterdir()
                                  if p.suffix.lower() in IMAGE_EXTENSIONS})
            if len(per_model) == len(MODELS):
                common = sorted(set(per_model[0]) & set(per_model[1]))
                if common:
                    stems[dataset_dir.name] = common
        return stems

    def datasets(self) -> list[str]:
        return sorted(self.stems)

    def image_token(self, dataset: str, model: str, stem: str) -> str:
        raw = f"{self._token_salt}:{dataset}:{model}:{stem}"
        token = hashlib.sha256(raw.encode()).hexdigest()[:24]
        path = self.content_root / dataset / model
        matches = [p for p in path.iterdir() if p.stem == stem]
        self._tokens[token] = matches[0]
        return token

    def resolve_token(self, token: str) -> Path | None:
        return self._tokens.get(token)

    def make_pair(self, dataset: str, session: str) -> PairInfo | None:
        """Deal one unseen pair for this session, or None when exhausted."""
        if dataset not in self.stems:
            raise KeyError(f"unknown dataset {dataset!r}; "
                           f"available: {self.datasets() or '<none>'}")
        with self._lock:
            seen = self.served.setdefault(session, set())
            fresh = [s for s in self.stems[dataset] if (dataset, s) not in seen]
            if not fresh:
                return None
            stem = self.rng.choice(fresh)
            left, right = MODELS if self.rng.random() < 0.5 else MODELS[::-1]
            self._counter += 1
            pair_id = f"{self._counter:06d}{self.rng.getrandbits(40):010x}"
            info = PairInfo(pair_id=pair_id, dataset=dataset, stem=stem,
                            left_model=left, right_model=right)
            self.pairs[pair_id] = info
            seen.add((dataset, stem))
            return info

    def record_vote(self, pair_id: str, chosen_side: str, session: str,
                    log: VoteLog) -> VoteRecord:
        if chosen_side not in SIDES:
            raise ValueError(f"chosen_side must be left or right, got {chosen_side!r}")
        with self._lock:
            info = self.pairs.get(pair_id)
            if info is None:
                raise KeyError(f"unknown pair_id {pair_id!r}")
            if (pair_id, session) in self.voted:
                raise FileExistsError(f"pair {pair_id} already voted in this session")
            record = VoteRecord(pair_id=pair_id, dataset=info.dataset,
                                left_model=info.left_model,
                                right_model=info.right_model,
                                chosen_side=chosen_side, session=session,
                                timestamp=time.time())
            log.append(record)
            self.voted.add((pair_id, session))
            return record


# --------------------------------------------------------------------------
# HTTP layer
# --------------------------------------------------------------------------

class VoteBody(BaseModel):
    pair_id: str
    chosen_side: str


def build_app(content_root: str | Path, log_path: str | Path = "votes.jsonl",
              seed: int | None = None,
              static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="realism survey")
    pool = PairPool(content_root, seed=seed)
    log = VoteLog(log_path)
    # replay the durable log so restarts keep rejecting duplicate votes
    for record in log.records():
        pool.voted.add((record.pair_id, record.session))
    app.state.pool = pool
    app.state.log = log

    def session_of(request: Request, response: Response) -> str:
        session = request.cookies.get(SESSION_COOKIE)
        if not session:
            session = secrets.token_hex(16)
            response.set_cookie(SESSION_COOKIE, session, httponly=True)
        return session

    @app.get("/api/datasets")
    def datasets():
        return {"datasets": pool.datasets()}

    @app.get("/api/pair")
    def pair(dataset: str, request: Request, response: Response):
        session = session_of(request, response)
        try:
            info = pool.make_pair(dataset, session)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if info is None:
            # pool exhausted for this session
            empty = Response(status_code=204)
            if not request.cookies.get(SESSION_COOKIE):
                empty.set_cookie(SESSION_COOKIE, session, httponly=True)
            return empty
        return {
            "pair_id": info.pair_id,
            "dataset": info.dataset,
            "left_url": f"/api/image/{pool.image_token(info.dataset, info.left_model, info.stem)}",
            "right_url": f"/api/image/{pool.image_token(info.dataset, info.right_model, info.stem)}",
        }

    @app.post("/api/vote")
    def vote(body: VoteBody, request: Request, response: Response):
        session = session_of(request, response)
        try:
            record = pool.record_vote(body.pair_id, body.chosen_side, session, log)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except FileExistsError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"ok": True, "pair_id": record.pair_id}

    @app.get("/api/results")
    def results():
        aggregated = aggregate_results(log.records())
        voted = set(aggregated["datasets"])
        aggregated["no_votes"] = [d for d in pool.datasets() if d not in voted]
        return aggregated

    @app.get("/api/image/{token}")
    def image(token: str):
        path = pool.resolve_token(token)
        if path is None or not path.is_file():
            raise HTTPException(status_code=404, detail="unknown image token")
        return FileResponse(path)

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
