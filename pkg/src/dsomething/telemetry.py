"""Log streams tagged by task parameters, plus time-series metrics."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import IoFailure, TagMutation, TimestampRegression


def _same(a: Any, b: Any) -> bool:
    # True == 1 in Python; tags must not conflate them.
    return type(a) is type(b) and a == b


def tags_match(tags: Mapping[str, Any], tag_filter: Mapping[str, Any]) -> bool:
    return all(k in tags and _same(tags[k], v) for k, v in tag_filter.items())


@dataclass
class LogStream:
    stream_id: str
    tags: dict[str, Any]
    entries: list[tuple[float, str, str]] = field(default_factory=list)


@dataclass
class MetricSeries:
    name: str
    points: list[tuple[float, float]] = field(default_factory=list)


class Telemetry:
    def __init__(self) -> None:
        self.streams: dict[str, LogStream] = {}
        self.series: dict[str, MetricSeries] = {}
        self._next_stream = 0
        self._lock = threading.RLock()

    def __getstate__(self) -> dict:
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state: dict) -> None:
        self.__dict__.update(state)
        self._lock = threading.RLock()

    def append_log(
        self,
        stream_id: str | None,
        tags: Mapping[str, Any] | None,
        severity: str,
        line: str,
        now: float,
    ) -> str:
        """Append one line, creating the stream on first use.

        Tags are fixed when the stream is created; later calls may omit them
        but must not change them.
        """
        with self._lock:
            if stream_id is None:
                self._next_stream += 1
                stream_id = f"stream-{self._next_stream:06d}"
            stream = self.streams.get(stream_id)
            if stream is None:
                stream = LogStream(stream_id, dict(tags or {}))
                self.streams[stream_id] = stream
            elif tags is not None:
                if set(tags) != set(stream.tags) or not tags_match(stream.tags, tags):
                    raise TagMutation(f"stream {stream_id} already has tags {stream.tags}")
            if stream.entries and now < stream.entries[-1][0]:
                raise TimestampRegression(f"{stream_id}: {now} < {stream.entries[-1][0]}")
            stream.entries.append((now, severity, line))
            return stream_id

    def put_metric(self, name: str, value: float, now: float) -> None:
        with self._lock:
            series = self.series.setdefault(name, MetricSeries(name))
            if series.points and now < series.points[-1][0]:
                raise TimestampRegression(f"{name}: {now} < {series.points[-1][0]}")
            series.points.append((now, value))

    def query_logs(self, tag_filter: Mapping[str, Any]) -> list[LogStream]:
        with self._lock:
            return [self.streams[s] for s in sorted(self.streams)
                    if tags_match(self.streams[s].tags, tag_filter)]

    def delete_logs(self) -> None:
        with self._lock:
            self.streams.clear()

    def export(self, directory: str | Path) -> dict[str, Any]:
        """Write ``logs/<stream>.log``, ``metrics/<name>.tsv`` and ``manifest.json``.

        Output depends only on the telemetry contents, so re-exporting yields
        identical bytes.
        """
        root = Path(directory)
        files: list[dict[str, Any]] = []
        with self._lock:
            try:
                for sid in sorted(self.streams):
                    stream = self.streams[sid]
                    rel = f"logs/{sid}.log"
                    lines = [json.dumps({"t": t, "severity": sev, "line": text}, sort_keys=True)
                             for t, sev, text in stream.entries]
                    _write(root / rel, lines)
                    files.append({"path": rel, "kind": "log", "stream_id": sid,
                                  "tags": stream.tags, "count": len(lines)})
                for name in sorted(self.series):
                    rel = f"metrics/{name}.tsv"
                    lines = [f"{t!r}\t{v!r}" for t, v in self.series[name].points]
                    _write(root / rel, lines)
                    files.append({"path": rel, "kind": "metric", "name": name, "count": len(lines)})
                manifest = {"file_count": len(files), "files": files}
                root.mkdir(parents=True, exist_ok=True)
                (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            except OSError as exc:
                raise IoFailure(f"export to {root}: {exc}") from exc
        return manifest


def _write(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))
