"""Render the protocol and file-format documentation from the constants table.

Docs are generated, committed, and guarded by a drift test: re-rendering
must reproduce the committed files byte for byte, so a changed code default
without a doc regeneration fails CI with DriftDetected.
"""

from __future__ import annotations

from pathlib import Path

from . import constants
from .errors import DriftDetected

_PROTOCOLS_HEADER = """\
# Training and evaluation protocols

All numeric protocol parameters in one place. The same table drives the
code defaults (`vxp.constants`); a test fails if either side drifts.

Provenance: `protocol` values define the training/evaluation protocols this
tool implements and should not be changed casually; `default` values are
implementation choices, configurable at the call sites that use them.

| name | value | provenance | meaning |
|------|-------|------------|---------|
"""

_PROTOCOLS_FOOTER = """
## Protocol summaries

**Training pair thresholds.** Samples closer than 10.0 m form positive
pairs, samples farther than 25.0 m are negatives; the band in between is
never sampled. Batch-hard mining selects, per anchor, the farthest positive
and the closest negative inside the batch by descriptor distance.

**Zero-triplet batch expansion.** After a batch, anchors whose hinge term
is already zero are counted; if their fraction strictly exceeds 30% of the
batch, the batch size grows by a factor of 1.4 (ceiling), capped at 256.
The new size takes effect at the next epoch.

**Pairwise multi-run evaluation.** Every ordered pair of distinct runs is
evaluated (queries from one run, the other run's full set as database) and
the unweighted mean recall over pairs is reported. Queries may be limited
to designated test regions.

**Revisit evaluation.** Queries and database are subsampled along the
trajectory every 20.0 m (database with a 5.0 m start offset). For a query
taken at time t0, only database entries with t < t0 and t0 - t > 10.0 s are
candidates, so immediate neighbors never count as matches.

**Recall metrics.** recall@k counts a query as correct when any of its k
nearest descriptors lies within 25.0 m of the query's true position;
queries with no in-radius database entry are excluded. recall@1% uses
k = max(1, ceil(N/100)) for a database of N entries. Recall curves are
emitted for k = 1..25.
"""

_FORMATS = """\
# File formats

All multi-byte integers are little-endian.

## Point cloud `.bin`

Consecutive float32 quadruples `(x, y, z, intensity)`, meters in the sensor
frame. Intensity is read and discarded. File size must be divisible by 16.

## Raw image grid `.img`

`u32 width`, `u32 height`, then `height * width` float32 values, row-major.
One channel (the synthetic renderer stores inverse depth).

## Manifest CSV

UTF-8 CSV with exact header
`id,timestamp_s,x_m,y_m,z_m,cloud_path,image_path,run_id`.
Ids must be unique; paths resolve relative to the manifest's directory.

## VXP-CAL v1 (calibration, text)

```
VXP-CAL v1
fx_n fy_n cx_n cy_n
r11 r12 r13 tx
r21 r22 r23 ty
r31 r32 r33 tz
```

Line 2 holds normalized pinhole intrinsics (dimensionless fractions of
image width/height); lines 3-5 are the first three rows of the 4x4
sensor-to-camera rigid transform (bottom row is implicitly `0 0 0 1`).
The KITTI importer converts `calib.txt` (`P2` + `Tr` rows) into this model,
normalizing `P2` intrinsics by the image dimensions and ignoring the `P2`
translation column.

## VXPD (descriptor sets, binary)

| field | type |
|-------|------|
| magic | `0x56 0x58 0x50 0x44` ("VXPD") |
| version | u16, currently 1 |
| descriptor_dim | u32 |
| count | u32 |
| records | count x (id u64, descriptor_dim x f32) |

Descriptor ids are the row ordinals of the manifest the descriptors were
extracted from.

## VXPC (checkpoints, binary)

Magic "VXPC", version u16 = 1, then named tensors until end of file:

| field | type |
|-------|------|
| name length | u16 |
| name | UTF-8 bytes |
| rank | u8 |
| extents | rank x u32 |
| values | f64, row-major |

## Result CSVs

Evaluation results: `protocol,k,recall` rows. Recall curves: `k,recall`
rows for k = 1..25. Training loss history: `epoch,step,loss` rows.
"""


def _fmt_value(value) -> str:
    if isinstance(value, tuple):
        return "(" + ", ".join(_fmt_value(v) for v in value) + ")"
    return str(value)


def render_protocol_docs() -> dict[str, str]:
    """Documentation files as {relative name: content}."""
    table_rows = []
    for name, value, provenance, note in constants.PROTOCOL_TABLE:
        table_rows.append(f"| `{name}` | {_fmt_value(value)} | {provenance} | {note} |")
    protocols = _PROTOCOLS_HEADER + "\n".join(table_rows) + "\n" + _PROTOCOLS_FOOTER
    return {"protocols.md": protocols, "formats.md": _FORMATS}


def write_protocol_docs(docs_dir) -> None:
    docs_dir = Path(docs_dir)
    docs_dir.mkdir(parents=True, exist_ok=True)
    for name, content in render_protocol_docs().items():
        (docs_dir / name).write_text(content)


def verify_protocol_docs(docs_dir) -> None:
    """Raise DriftDetected when committed docs differ from a fresh render."""
    docs_dir = Path(docs_dir)
    for name, content in render_protocol_docs().items():
        path = docs_dir / name
        if not path.exists():
            raise DriftDetected(f"{path} is missing; regenerate the docs")
        if path.read_text() != content:
            raise DriftDetected(f"{path} differs from the rendered constants table")
