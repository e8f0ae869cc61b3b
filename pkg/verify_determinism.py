import filecmp
import sys
import tempfile
from pathlib import Path

from dotenv import load_dotenv

import simulator
from config import load_config
from pipeline import run
from scan_model import Pose2

# Load environment variables
load_dotenv()

COMPARED = ["odometry.csv", "corrected.csv", "map.csv", "timing.csv", "loop_events.csv",
            "graph_nodes.csv", "graph_edges.csv", "config.resolved.env"]


def verify_determinism(n_scans: int = 40) -> bool:
    print("--- Verifying Run Determinism ---")
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        print(f"\n1. Rendering {n_scans} scans of the room fixture...")
        artifacts = simulator.ArtifactConfig(speckle_prob=0.002, ghost_prob=0.05, noise_seed=7)
        script = simulator.straight_script(speed=0.5, duration=n_scans * 0.25 + 1.0, start=Pose2(-4.0, 0.0, 0.0))
        simulator.generate_sequence(simulator.room(), script, n_scans, output_dir=tmp / "scans", artifacts=artifacts)

        cfg = load_config(overrides={"loop.min_separation": "5"}, use_env=False)
        print("2. Two single-thread runs and one concurrent run...")
        run(cfg, tmp / "scans", tmp / "a", single_thread=True)
        run(cfg, tmp / "scans", tmp / "b", single_thread=True)
        run(cfg, tmp / "scans", tmp / "c", single_thread=False)

        print("\n3. Byte-comparing outputs")
        for name in COMPARED:
            for other in ("b", "c"):
                same = filecmp.cmp(tmp / "a" / name, tmp / other / name, shallow=False)
                print(f"{'✅' if same else '❌'} {name}: a == {other}")
                ok = ok and same

    if ok:
        print("\n✅ Determinism Verified: all outputs are byte-identical")
    else:
        print("\n❌ Determinism Failed!")
    return ok


if __name__ == "__main__":
    sys.exit(0 if verify_determinism() else 1)
