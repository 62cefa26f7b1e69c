"""On-disk formats for datasets, graph sets, weights and audit trails.

Text artifacts are JSON documents written with sorted keys and compact
separators, so a read followed by a write reproduces the original bytes.
Weight files are one JSON header line followed by little-endian float64s.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .attack import AttackResult, CandidateRecord
from .diffusion import DenoiserParams
from .gnn import PARAM_LAYOUT_VERSION, GnnClassifier
from .graphdata import CategoricalGraph, LabeledDataset

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class CorruptHeaderError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _check_header(header, kind, required):
    if not isinstance(header, dict) or header.get("kind") != kind:
        raise CorruptHeaderError(f"expected a {kind!r} header")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{kind} format version {header.get('format_version')!r} is not supported (expected {FORMAT_VERSION})")
    missing = [k for k in required if k not in header]
    if missing:
        raise CorruptHeaderError(f"{kind} header is missing {missing}")


def _parse_header_line(line: bytes, kind: str):
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable {kind} header: {exc}") from None


# --------------------------------------------------------------------------- graphs


def graph_record(g: CategoricalGraph, label: int | None = None) -> dict:
    rec = {"n": g.n, "nodes": [int(c) for c in g.nodes], "edges": [list(t) for t in g.edge_list()]}
    if label is not None:
        rec["label"] = int(label)
    return rec


def graph_from_record(rec: dict, a: int, b: int) -> CategoricalGraph:
    g = CategoricalGraph.from_edge_list(rec["nodes"], rec["edges"], a, b)
    if g.n != rec["n"]:
        raise FormatError("record node count does not match its node list")
    return g


def _write_graph_lines(header: dict, graphs, labels) -> bytes:
    lines = [_dumps(header)]
    for g, y in zip(graphs, labels):
        lines.append(_dumps(graph_record(g, y)))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _read_graph_lines(data: bytes, kind: str, required):
    if not data:
        raise TruncationError(f"empty {kind} file")
    lines = data.split(b"\n")
    header = _parse_header_line(lines[0], kind)
    _check_header(header, kind, required + ["count"])
    if lines[-1] != b"":
        raise TruncationError(f"{kind} file does not end with a complete record")
    body = lines[1:-1]
    if len(body) < header["count"]:
        raise TruncationError(f"{kind} file holds {len(body)} of {header['count']} records")
    if len(body) > header["count"]:
        raise FormatError(f"{kind} file holds more records than its header declares")
    recs = []
    for i, line in enumerate(body):
        try:
            recs.append(json.loads(line.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise TruncationError(f"record {i} of the {kind} file is incomplete") from None
    return header, recs


def dataset_bytes(ds: LabeledDataset) -> bytes:
    header = {"kind": "dataset", "format_version": FORMAT_VERSION, "a": ds.a, "b": ds.b,
              "C": ds.num_classes, "n_max": ds.n_max, "seed": ds.seed, "count": len(ds)}
    return _write_graph_lines(header, ds.graphs, ds.labels)


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    h, recs = _read_graph_lines(data, "dataset", ["a", "b", "C", "n_max"])
    graphs = [graph_from_record(r, h["a"], h["b"]) for r in recs]
    return LabeledDataset(graphs, [r["label"] for r in recs], h["C"], h["a"], h["b"], h["n_max"], h.get("seed"))


def graphset_bytes(graphs, labels, a, b, meta: dict | None = None) -> bytes:
    header = {"kind": "graphs", "format_version": FORMAT_VERSION, "a": a, "b": b,
              "count": len(graphs), "meta": meta or {}}
    return _write_graph_lines(header, graphs, labels)


def graphset_from_bytes(data: bytes):
    h, recs = _read_graph_lines(data, "graphs", ["a", "b"])
    graphs = [graph_from_record(r, h["a"], h["b"]) for r in recs]
    return graphs, [r.get("label", -1) for r in recs], h.get("meta", {})


# --------------------------------------------------------------------------- weights


def _weights_bytes(header: dict, vec: np.ndarray) -> bytes:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    header = dict(header, num_params=int(vec.size), format_version=FORMAT_VERSION)
    return (_dumps(header) + "\n").encode("utf-8") + vec.tobytes()


def _weights_from_bytes(data: bytes, kind: str, required):
    cut = data.find(b"\n")
    if cut < 0:
        raise CorruptHeaderError(f"{kind} file has no header line")
    header = _parse_header_line(data[:cut], kind)
    _check_header(header, kind, required + ["num_params"])
    body = data[cut + 1:]
    want = 8 * int(header["num_params"])
    if len(body) < want:
        raise TruncationError(f"{kind} weights truncated: {len(body)} of {want} bytes")
    if len(body) > want:
        raise FormatError(f"{kind} file has {len(body) - want} trailing bytes")
    return header, np.frombuffer(body, dtype="<f8").astype(float)


def model_bytes(clf: GnnClassifier) -> bytes:
    header = {"kind": "gnn", "dims": clf.dims, "L": clf.homogeneity_degree, "seed": clf.seed,
              "layout_version": PARAM_LAYOUT_VERSION}
    return _weights_bytes(header, clf.to_vector())


def model_from_bytes(data: bytes) -> GnnClassifier:
    h, vec = _weights_from_bytes(data, "gnn", ["dims", "L", "layout_version"])
    if h["layout_version"] != PARAM_LAYOUT_VERSION:
        raise VersionMismatchError(f"parameter layout {h['layout_version']} is not supported")
    dims = h["dims"]
    shell = GnnClassifier.init(dims[0], dims[1:-1], dims[-1], 0)
    if shell.num_params != vec.size:
        raise CorruptHeaderError("declared dims disagree with the parameter count")
    clf = shell.with_vector(vec)
    clf.seed = h.get("seed")
    if clf.homogeneity_degree != h["L"]:
        raise CorruptHeaderError("declared homogeneity degree disagrees with dims")
    return clf


def denoiser_bytes(p: DenoiserParams, schedule_kind: str, seed) -> bytes:
    header = dict(p.header(), kind="denoiser", schedule_kind=schedule_kind, seed=seed)
    return _weights_bytes(header, p.to_vector())


def denoiser_from_bytes(data: bytes):
    h, vec = _weights_from_bytes(
        data, "denoiser", ["a", "b", "T", "hidden", "pair_hidden", "rounds", "schedule_kind"])
    shell = DenoiserParams(h["a"], h["b"], h["T"], h["hidden"], h["pair_hidden"], h["rounds"])
    try:
        p = shell.with_vector(vec)
    except ValueError as exc:
        raise CorruptHeaderError(str(exc)) from None
    return p, h["schedule_kind"], h.get("seed")


# --------------------------------------------------------------------------- audit trail


def audit_bytes(result: AttackResult, a: int, b: int) -> bytes:
    recs = []
    for r in result.records:
        recs.append({
            "cid": r.cid, "source_index": r.source_index, "label": r.label, "seed": r.seed,
            "stages": {k: graph_record(g) for k, g in r.stages.items()},
            "confidence": r.confidence, "lam": r.lam, "rank": r.rank,
            "substitutions": r.substitutions,
        })
    doc = {"kind": "audit", "format_version": FORMAT_VERSION, "variant": result.variant,
           "a": a, "b": b, "records": recs}
    return (_dumps(doc) + "\n").encode("utf-8")


def audit_from_bytes(data: bytes):
    if not data.endswith(b"\n"):
        raise TruncationError("audit file does not end with a newline")
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise TruncationError("audit file is incomplete") from None
    _check_header(doc, "audit", ["variant", "a", "b", "records"])
    out = []
    for r in doc["records"]:
        rec = CandidateRecord(r["cid"], r["source_index"], r["label"], r["seed"])
        rec.stages = {k: graph_from_record(g, doc["a"], doc["b"]) for k, g in r["stages"].items()}
        rec.confidence = r["confidence"]
        rec.lam = r["lam"]
        rec.rank = r["rank"]
        rec.substitutions = r["substitutions"]
        out.append(rec)
    return doc["variant"], out


# --------------------------------------------------------------------------- file helpers


def save(path, data: bytes):
    atomic_write(path, data)


def load(path) -> bytes:
    return Path(path).read_bytes()
