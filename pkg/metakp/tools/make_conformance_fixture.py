"""Regenerate the sidecar conformance fixture used by the engine test suite.

Writes tests/fixtures/metakp_sidecar.bin (produced by the trainer's
exporter) and metakp_sidecar_expected.npz (the exact keypoints and
descriptors the exporter reported writing). The engine suite loads the
binary with its own reader and compares against the npz bit for bit, so the
two packages only ever meet through the file format.

Run from the repository root:  python3 metakp/tools/make_conformance_fixture.py
"""

import pathlib

import numpy as np
import torch

from metakp.data import make_corner_image
from metakp.export import export_sidecars
from metakp.net import KeypointNet


def main():
    out_dir = pathlib.Path(__file__).resolve().parents[2] / "tests" / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(42)
    net = KeypointNet(dim=32, channels=(4, 4, 8, 8))
    rng = np.random.default_rng(42)
    images = [make_corner_image(rng)[0] for _ in range(4)]
    # frame 2 is featureless so the fixture covers degenerate input
    images[2] = np.full_like(images[2], 0.5)

    written = export_sidecars(net, images, budget=20,
                              path=out_dir / "metakp_sidecar.bin",
                              threshold=0.05)
    arrays = {}
    for fid, (pts, desc) in written.items():
        arrays[f"pts_{fid}"] = pts
        arrays[f"desc_{fid}"] = desc
    np.savez(out_dir / "metakp_sidecar_expected.npz", **arrays)
    counts = {fid: len(p) for fid, (p, _) in written.items()}
    print("wrote fixture, keypoints per frame:", counts)


if __name__ == "__main__":
    main()
