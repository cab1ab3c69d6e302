"""Per-client evaluation, metrics files, embedding export and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import EncoderParams, HeadParams, encoder_forward
from .numerics import l2_normalize_rows

CHECKPOINT_MAGIC = "REPFL-CHECKPOINT"
CHECKPOINT_VERSION = 1
STAGES = ("crl", "pcl", "baseline")

log = logging.getLogger(__name__)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ClientEval:
    id: int
    n_test: int
    correct: int
    per_class: dict
    per_class_counts: dict

    @property
    def top1(self):
        return None if self.n_test == 0 else self.correct / self.n_test

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "n_test": self.n_test,
            "correct": self.correct,
            "top1": self.top1,
            "per_class": {str(c): a for c, a in sorted(self.per_class.items())},
            "per_class_counts": {str(c): n for c, n in sorted(self.per_class_counts.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), int(d["n_test"]), int(d["correct"]),
                   {int(c): float(a) for c, a in d["per_class"].items()},
                   {int(c): int(n) for c, n in d.get("per_class_counts", {}).items()})


@dataclass
class EvalReport:
    method: str
    config_hash: str
    clients: list
    seed: int = 0
    partition_hash: str = ""
    traces: list = field(default_factory=list)

    @property
    def federation_top1_mean(self):
        vals = [c.top1 for c in self.clients if c.top1 is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def federation_top1_weighted(self):
        n = sum(c.n_test for c in self.clients)
        return sum(c.correct for c in self.clients) / n if n else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "partition_hash": self.partition_hash,
            "clients": [c.to_dict() for c in sorted(self.clients, key=lambda c: c.id)],
            "federation_top1_mean": self.federation_top1_mean,
            "federation_top1_weighted": self.federation_top1_weighted,
            "round_traces": [float(v) for v in self.traces],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["method"], d["config_hash"], [ClientEval.from_dict(c) for c in d["clients"]],
                   int(d.get("seed", 0)), d.get("partition_hash", ""),
                   [float(v) for v in d.get("round_traces", [])])

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def _predict(model, x):
    return model.predict(x) if hasattr(model, "predict") else np.asarray(model(x))


def evaluate_client(model, client) -> ClientEval:
    """Top-1 and per-class accuracy of ``model`` on one client's test rows."""
    y = np.asarray(client.test_y)
    if y.size == 0:
        return ClientEval(int(client.client_id), 0, 0, {}, {})
    pred = np.asarray(_predict(model, client.test_x)).ravel()
    hit = pred == y
    per_class, counts = {}, {}
    for c in np.unique(y):
        mask = y == c
        counts[int(c)] = int(mask.sum())
        per_class[int(c)] = int(hit[mask].sum()) / counts[int(c)]
    return ClientEval(int(client.client_id), int(y.size), int(hit.sum()), per_class, counts)


def evaluate(models, clients, method: str = "", cfg_hash: str = "", seed: int = 0,
             partition_hash: str = "", traces=()) -> EvalReport:
    """Evaluate each client's model on its own test set.

    ``models`` maps client id to a predictor (anything with ``predict(x)`` or
    a callable returning labels); a single predictor is shared by all clients.
    """
    if not isinstance(models, dict):
        models = {c.client_id: models for c in clients}
    evals = [evaluate_client(models[c.client_id], c) for c in clients]
    return EvalReport(method, cfg_hash, sorted(evals, key=lambda e: e.id), seed, partition_hash,
                      list(traces))


def write_metrics_csv(path, rows, append: bool = False) -> None:
    """Write ``(method, seed, round, mean_train_loss)`` rows."""
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["method", "seed", "round", "mean_train_loss"])
        for method, seed, rnd, loss in rows:
            writer.writerow([method, int(seed), int(rnd), repr(float(loss))])


def read_metrics_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [(r["method"], int(r["seed"]), int(r["round"]), float(r["mean_train_loss"]))
                for r in csv.DictReader(fh)]


def embeddings(encoder: EncoderParams, features, with_mask: bool = False):
    r, _ = encoder_forward(encoder, features)
    z, _, degenerate = l2_normalize_rows(r)
    return (z, degenerate) if with_mask else z


def export_embeddings(encoder: EncoderParams, dataset, path) -> int:
    """Write ``label,z0..z{g-1}`` rows of unit-normalized embeddings; returns the row count.

    A sample whose feature vector is exactly zero has no direction and is
    written as a zero row.
    """
    z, degenerate = embeddings(encoder, dataset.features, with_mask=True)
    if degenerate.any():
        log.warning("%d samples have zero features; exported as zero rows", int(degenerate.sum()))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"z{k}" for k in range(z.shape[1])])
        for label, row in zip(dataset.labels, z):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])
    return z.shape[0]


@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Textual header followed by a little-endian float64 payload."""
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ckpt.stage!r}")
    lines = [CHECKPOINT_MAGIC, f"version={ckpt.version}", f"stage={ckpt.stage}",
             f"config_hash={ckpt.config_hash}",
             "config=" + json.dumps(ckpt.config, sort_keys=True, separators=(",", ":"),
                                    default=str)]
    for key, value in sorted(ckpt.meta.items()):
        lines.append(f"meta.{key}={value}")
    payload = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor={name}:{shape}")
        payload.append(arr.astype("<f8").tobytes())
    lines.append("end_header")
    with Path(path).open("wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in payload:
            fh.write(blob)


def _parse_shape(text):
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def load_checkpoint(path, expected_shapes: dict = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    marker = b"\nend_header\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CheckpointError("corrupt checkpoint header")
    header = raw[:cut].decode("utf-8").split("\n")[1:]
    payload = raw[cut + len(marker):]
    fields, meta, specs = {}, {}, []
    for line in header:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"corrupt header line {line!r}")
        if key == "tensor":
            name, _, shape = value.rpartition(":")
            try:
                specs.append((name, _parse_shape(shape)))
            except ValueError:
                raise CheckpointError(f"bad tensor shape {shape!r}") from None
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    try:
        version = int(fields["version"])
        stage = fields["stage"]
        config = json.loads(fields["config"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if config_hash(config) != fields.get("config_hash"):
        raise CheckpointError("config hash does not match stored config")
    sizes = [int(np.prod(shape)) for _, shape in specs]
    if len(payload) != 8 * sum(sizes):
        raise CheckpointError(f"payload has {len(payload)} bytes, header declares {8 * sum(sizes)}")
    tensors, offset = {}, 0
    for (name, shape), size in zip(specs, sizes):
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        offset += 8 * size
    if expected_shapes is not None:
        got = {n: t.shape for n, t in tensors.items()}
        want = {n: tuple(s) for n, s in expected_shapes.items()}
        if got != want:
            diff = [f"{n}: checkpoint {got.get(n)} vs expected {want.get(n)}"
                    for n in sorted(set(got) | set(want)) if got.get(n) != want.get(n)]
            raise CheckpointError("shape mismatch: " + "; ".join(diff))
    return Checkpoint(stage, config, tensors, meta, version)


def stack_tensors(prefix: str, params) -> dict:
    out = {}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return out


def encoder_checkpoint(encoder: EncoderParams, config: dict, stage: str = "crl",
                       head: HeadParams = None) -> Checkpoint:
    tensors = stack_tensors("encoder", encoder)
    meta = {"encoder.activations": ",".join(encoder.activations)}
    if head is not None:
        tensors.update(stack_tensors("head", head))
        meta["head.activations"] = ",".join(head.activations)
        meta["head.kind"] = head.kind
    return Checkpoint(stage, config, tensors, meta)


def _stack_from(ckpt: Checkpoint, prefix: str):
    acts = ckpt.meta.get(f"{prefix}.activations")
    if acts is None:
        raise CheckpointError(f"checkpoint holds no {prefix}")
    acts = acts.split(",")
    weights = [ckpt.tensors[f"{prefix}.w{k}"] for k in range(len(acts))]
    biases = [ckpt.tensors[f"{prefix}.b{k}"] for k in range(len(acts))]
    return weights, biases, acts


def encoder_from_checkpoint(ckpt: Checkpoint) -> EncoderParams:
    w, b, acts = _stack_from(ckpt, "encoder")
    return EncoderParams(tuple(w), tuple(b), tuple(acts))


def head_from_checkpoint(ckpt: Checkpoint) -> HeadParams:
    w, b, acts = _stack_from(ckpt, "head")
    return HeadParams(tuple(w), tuple(b), tuple(acts), kind=ckpt.meta["head.kind"])
