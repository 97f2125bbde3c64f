"""On-disk formats: binary checkpoints, partition files, attention dumps, manifests."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .partition import Partition, edge_cut

CHECKPOINT_MAGIC = b"CBT1"
PARTITION_VERSION = "1"
ATTN_DUMP_VERSION = "1"
FORMAT_VERSIONS = {
    "checkpoint": CHECKPOINT_MAGIC.decode(),
    "partition": PARTITION_VERSION,
    "attention_dump": ATTN_DUMP_VERSION,
    "metrics": "jsonl-1",
}


class ArtifactError(ValueError):
    """Malformed or truncated artifact; message carries the byte offset when known."""


class VersionMismatch(ArtifactError):
    def __init__(self, found, expected):
        super().__init__(f"format version mismatch: file has {found!r}, reader expects {expected!r}")
        self.found = found
        self.expected = expected


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(state) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    for name, arr in state.items():
        a = np.asarray(arr, dtype="<f8")
        if a.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 4:
        raise ArtifactError(f"truncated checkpoint at byte {len(blob)}: missing magic")
    magic = blob[:4]
    if magic != CHECKPOINT_MAGIC:
        if magic[:3] == CHECKPOINT_MAGIC[:3]:
            raise VersionMismatch(magic.decode("ascii", "replace"), CHECKPOINT_MAGIC.decode())
        raise ArtifactError(f"not a checkpoint: bad magic {magic!r} at byte 0")
    out = OrderedDict()
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ArtifactError(f"truncated checkpoint at byte {pos}: expected {n} bytes of {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        rows, cols = struct.unpack("<II", take(8, f"shape of {name!r}"))
        vals = np.frombuffer(take(8 * rows * cols, f"values of {name!r}"), dtype="<f8")
        out[name] = vals.reshape(rows, cols).astype(np.float64)
    return out


def save_checkpoint(path, state):
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# partitions


def save_partition(path, partition: Partition, graph=None):
    """``node<TAB>cluster`` lines, then a ``P=.. eps=.. cut=.. maxload=..`` footer."""
    lines = [f"# partition v{PARTITION_VERSION}"]
    lines += [f"{u}\t{c}" for u, c in enumerate(partition.assignment.tolist())]
    cut = edge_cut(graph, partition) if graph is not None else -1
    lines.append(
        f"P={partition.num_parts} eps={partition.epsilon!r} cut={cut} maxload={int(partition.sizes.max())}"
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_partition(path) -> Partition:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# partition v"):
        raise ArtifactError(f"{path}: missing partition header")
    version = text[0].split("v", 1)[1]
    if version != PARTITION_VERSION:
        raise VersionMismatch(version, PARTITION_VERSION)
    footer = dict(kv.split("=", 1) for kv in text[-1].split())
    if "P" not in footer:
        raise ArtifactError(f"{path}: missing P= footer")
    body = text[1:-1]
    assignment = np.empty(len(body), dtype=np.int64)
    for i, line in enumerate(body):
        u, c = line.split("\t")
        if int(u) != i:
            raise ArtifactError(f"{path}: line {i + 2} names node {u}, expected {i}")
        assignment[i] = int(c)
    return Partition(assignment, int(footer["P"]), float(footer.get("eps", 0.1)))


# ---------------------------------------------------------------------------
# attention dumps


def _row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def encode_attention_dump(view) -> str:
    """Text dump of an :class:`analysis.AttnView`.

    Bi-level: ``BGA P=<P> layer=<k>``, then per cluster ``cluster p: n x n``
    followed by n rows (each prefixed by nothing), then ``inter: P x P`` and
    P rows. Dense: ``DENSE N=<N> layer=<k>`` and N rows. Reals use repr so
    the round trip is exact.
    """
    lines = [f"# attention dump v{ATTN_DUMP_VERSION}"]
    if view.is_dense:
        lines.append(f"DENSE N={view.num_nodes} layer={view.layer}")
        lines += [_row(r) for r in view.matrix]
    else:
        p = view.partition.num_parts
        lines.append(f"BGA P={p} layer={view.layer}")
        lines.append("assignment: " + " ".join(map(str, view.partition.assignment.tolist())))
        for i, blk in enumerate(view.intra):
            n = len(blk)
            lines.append(f"cluster {i}: {n}x{n}")
            lines += [_row(r) for r in blk]
        lines.append(f"inter: {p}x{p}")
        lines += [_row(r) for r in view.inter]
    return "\n".join(lines) + "\n"


def decode_attention_dump(text: str):
    from .analysis import AttnView

    offsets = []
    pos = 0
    lines = text.split("\n")
    for ln in lines:
        offsets.append(pos)
        pos += len(ln.encode("utf-8")) + 1
    if lines and lines[-1] == "":
        lines.pop()
    i = 0

    def fail(msg):
        at = offsets[i] if i < len(offsets) else pos
        raise ArtifactError(f"attention dump byte {at}: {msg}")

    def next_line(what):
        nonlocal i
        if i >= len(lines):
            fail(f"unexpected end of file, wanted {what}")
        i += 1
        return lines[i - 1]

    def matrix(rows, cols, what):
        out = np.empty((rows, cols))
        for r in range(rows):
            line = next_line(f"row {r} of {what}")
            try:
                vals = [float(x) for x in line.split()]
            except ValueError:
                i_back()
                fail(f"non-numeric entry in {what}")
            if len(vals) != cols:
                i_back()
                fail(f"{what} row {r} has {len(vals)} entries, expected {cols}")
            out[r] = vals
        return out

    def i_back():
        nonlocal i
        i -= 1

    head = next_line("version header")
    if not head.startswith("# attention dump v"):
        i_back()
        fail("missing version header")
    version = head.rsplit("v", 1)[1]
    if version != ATTN_DUMP_VERSION:
        raise VersionMismatch(version, ATTN_DUMP_VERSION)
    kind = next_line("kind line").split()
    fields = dict(f.split("=", 1) for f in kind[1:])
    layer = int(fields.get("layer", 0))
    if kind[0] == "DENSE":
        n = int(fields["N"])
        return AttnView(matrix=matrix(n, n, "dense matrix"), layer=layer)
    if kind[0] != "BGA":
        i_back()
        fail(f"unknown dump kind {kind[0]!r}")
    p = int(fields["P"])
    assign_line = next_line("assignment")
    assignment = np.array([int(x) for x in assign_line.split(":", 1)[1].split()], dtype=np.int64)
    partition = Partition(assignment, p)
    intra = []
    for c in range(p):
        hdr = next_line(f"cluster {c} header")
        if not hdr.startswith(f"cluster {c}:"):
            i_back()
            fail(f"expected header of cluster {c}")
        n = int(hdr.split(":")[1].strip().split("x")[0])
        intra.append(matrix(n, n, f"cluster {c}"))
    hdr = next_line("inter header")
    if not hdr.startswith("inter:"):
        i_back()
        fail("expected inter header")
    inter = matrix(p, p, "inter matrix")
    return AttnView(intra=intra, inter=inter, partition=partition, layer=layer)


def save_attention_dump(path, view):
    Path(path).write_text(encode_attention_dump(view), encoding="utf-8")


def load_attention_dump(path):
    return decode_attention_dump(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# metrics and manifests


def read_metrics(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(directory, subcommand, config, seed, extra=None):
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "config": config,
        "format_versions": FORMAT_VERSIONS,
    }
    if extra:
        manifest.update(extra)
    write_json(Path(directory) / "manifest.json", manifest)
    return manifest
