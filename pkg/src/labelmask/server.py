"""JSON-over-HTTP intervention service.

Three endpoints over a model loaded once and never mutated:

    GET  /model/info   label names, groups, model configuration
    GET  /samples      demo sample ids with their ground-truth targets
    POST /predict      {sample_id | features, states} -> per-label
                       probabilities plus the all-unknown baseline

The prediction math lives in ``intervene_response``, which the ``predict``
CLI command calls as well, so the endpoint and the CLI cannot drift apart.
Requests are handled concurrently (one thread per request); forward passes
share the immutable parameter tensors.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import LabelState, LabelTransformer, all_unknown_states

STATE_NAMES = {"unknown": LabelState.UNKNOWN, "negative": LabelState.NEGATIVE,
               "positive": LabelState.POSITIVE}
STATE_WORDS = {int(v): k for k, v in STATE_NAMES.items()}


class RequestError(ValueError):
    """Client-side request problem; the message starts with the field path."""


def parse_states(raw, label_names: list[str]) -> np.ndarray:
    """[{label, state}, ...] -> int state vector; unspecified labels stay unknown."""
    states = all_unknown_states(1, len(label_names))[0]
    if raw is None:
        return states
    if not isinstance(raw, list):
        raise RequestError("states: expected a list of {label, state} objects")
    index = {name: i for i, name in enumerate(label_names)}
    for pos, item in enumerate(raw):
        if not isinstance(item, dict):
            raise RequestError(f"states[{pos}]: expected an object")
        if "label" not in item:
            raise RequestError(f"states[{pos}].label: required")
        if "state" not in item:
            raise RequestError(f"states[{pos}].state: required")
        name = item["label"]
        if name not in index:
            raise RequestError(
                f"states[{pos}].label: unknown label {name!r}; valid names: "
                + ", ".join(label_names)
            )
        word = item["state"]
        if not isinstance(word, str) or word not in STATE_NAMES:
            raise RequestError(
                f"states[{pos}].state: must be one of " + "|".join(STATE_NAMES)
            )
        states[index[name]] = STATE_NAMES[word]
    return states


def parse_features(raw, model: LabelTransformer) -> np.ndarray:
    cfg = model.config
    want = (cfg.grid_h, cfg.grid_w, cfg.embed_dim)
    try:
        arr = np.asarray(raw, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise RequestError(f"features: not a numeric array: {exc}") from exc
    if arr.shape != want:
        raise RequestError(f"features: expected shape {list(want)}, got {list(arr.shape)}")
    if not np.isfinite(arr).all():
        raise RequestError("features: entries must be finite")
    return arr[None, ...]


def intervene_response(model: LabelTransformer, features, states: np.ndarray) -> dict:
    """The shared inference core: one intervened pass plus the baseline pass."""
    states = np.asarray(states, dtype=np.int8).reshape(1, -1)
    current = model.forward(features, states).probs[0]
    baseline = model.forward(
        features, all_unknown_states(1, model.config.num_labels)
    ).probs[0]
    return {
        "labels": [
            {
                "name": name,
                "probability": float(current[i]),
                "state": STATE_WORDS[int(states[0, i])],
            }
            for i, name in enumerate(model.label_names)
        ],
        "baseline": [float(p) for p in baseline],
    }


def resolve_request_inputs(payload: dict, model: LabelTransformer,
                           dataset: Dataset | None) -> tuple:
    """InterveneRequest body -> (features, states) for intervene_response."""
    if not isinstance(payload, dict):
        raise RequestError("body: expected a JSON object")
    has_sample = "sample_id" in payload
    has_features = "features" in payload
    needs_image = not model.config.no_image_ablation
    if has_sample and has_features:
        raise RequestError("body: give either sample_id or features, not both")
    features = None
    if has_sample:
        if dataset is None:
            raise RequestError("sample_id: no dataset is loaded on this server")
        sid = payload["sample_id"]
        if sid not in dataset.sample_ids:
            raise RequestError(f"sample_id: no sample {sid!r}")
        if needs_image:
            features = dataset.features[dataset.sample_ids.index(sid)][None, ...]
    elif has_features:
        if not needs_image:
            raise RequestError("features: this model runs without image features")
        features = parse_features(payload["features"], model)
    elif needs_image:
        raise RequestError("body: sample_id or features is required")
    states = parse_states(payload.get("states"), model.label_names)
    return features, states


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}


class _Handler(BaseHTTPRequestHandler):
    server_version = "labelmask"
    model: LabelTransformer
    dataset: Dataset | None
    ui_dir: Path | None
    quiet: bool

    def log_message(self, fmt, *args):
        if not self.quiet:
            super().log_message(fmt, *args)

    def _send_json(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/model/info":
            ds = self.dataset
            self._send_json(200, {
                "labels": self.model.label_names,
                "groups": None if ds is None or ds.groups is None
                else {k: list(v) for k, v in ds.groups.items()},
                "target_count": None if ds is None else ds.target_count,
                "config": self.model.config.to_dict(),
            })
            return
        if self.path == "/samples":
            ds = self.dataset
            samples = [] if ds is None else [
                {"id": sid, "targets": ds.targets[i].tolist()}
                for i, sid in enumerate(ds.sample_ids)
            ]
            self._send_json(200, {"samples": samples})
            return
        if self.ui_dir is not None:
            self._serve_static()
            return
        self._send_json(404, {"error": f"no such path: {self.path}"})

    def _serve_static(self):
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        root = self.ui_dir.resolve()
        target = (root / rel).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            self._send_json(404, {"error": f"no such path: {self.path}"})
            return
        body = target.read_bytes()
        self.send_response(200)
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path != "/predict":
            self._send_json(404, {"error": f"no such path: {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            try:
                payload = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise RequestError(f"body: invalid JSON: {exc}") from exc
            features, states = resolve_request_inputs(payload, self.model, self.dataset)
            response = intervene_response(self.model, features, states)
        except RequestError as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(200, response)


def build_server(model: LabelTransformer, dataset: Dataset | None,
                 host: str = "127.0.0.1", port: int = 8752,
                 ui_dir=None, quiet: bool = False) -> ThreadingHTTPServer:
    """Construct (but do not start) the HTTP server; callers own its lifecycle."""
    handler = type("BoundHandler", (_Handler,), {
        "model": model,
        "dataset": dataset,
        "ui_dir": None if ui_dir is None else Path(ui_dir),
        "quiet": quiet,
    })
    return ThreadingHTTPServer((host, port), handler)


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    """Start serve_forever on a daemon thread (used by tests)."""
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
