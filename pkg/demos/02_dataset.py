"""
Generating a small training set
===============================

Writes a handful of elastic, sand and rigid animations plus the manifest.
"""
import sys
import tempfile
from pathlib import Path

from physdyn.core import icosphere, box_mesh
from physdyn.datagen import DatasetSpec, generate_dataset, read_manifest
from physdyn.mpm import SimConfig

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

spec = DatasetSpec(counts={"elastic": 2, "sand": 1, "rigid": 1}, num_points=128, num_frames=6,
                   youngs_range=(1e4, 1e5), sim=SimConfig(resolution=24), seed=1)
rows = generate_dataset(spec, [icosphere(2), box_mesh()], out)

for row in read_manifest(out / "manifest.jsonl"):
    print(row["file"], row["material"])
print(f"{sum(r['status'] == 'ok' for r in rows)} of {len(rows)} written to {out}")
