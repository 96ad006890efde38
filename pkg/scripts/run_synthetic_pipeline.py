"""Full synthetic pipeline on one sequence: synth, icp-align, refine, vh, evaluation, report.

    python scripts/run_synthetic_pipeline.py --out runs/demo [--frames 64] [--seed 0]
"""
import argparse
import os
import sys
import time

from horeg.cli import main as horeg


def run_pipeline(out, frames=64, seed=0, iterations=250, resolution=128, kind="bumpy_sphere",
                 pose_deg=2.0, pose_m=0.01, verbose=True):
    seq = os.path.join(out, "seq")
    steps = [
        ["synth", "--kind", kind, "--frames", str(frames), "--seed", str(seed),
         "--noise-pose-deg", str(pose_deg), "--noise-pose-m", str(pose_m), "--tag", f"kind={kind}",
         "--out", seq],
        ["icp-align", "--seq", seq, "--seed", str(seed)],
        ["refine", "--seq", seq, "--iterations", str(iterations), "--seed", str(seed)],
        ["vh", "--seq", seq, "--resolution", str(resolution)],
        ["eval-recon", "--seq", seq, "--seed", str(seed), "--threshold", "0.005"],
        ["eval-poses", "--seq", seq, "--pred", os.path.join(seq, "poses", "icp.txt"),
         "--out", os.path.join(seq, "reports", "poses_icp")],
        ["eval-poses", "--seq", seq],
        ["report", os.path.join(seq, "reports", "recon.json"), os.path.join(seq, "reports", "poses.json"),
         "--group-by", "kind", "--out", os.path.join(out, "summary")],
    ]
    for argv in steps:
        t0 = time.perf_counter()
        code = horeg(argv)
        if verbose:
            print(f"{argv[0]:<11} exit={code} {time.perf_counter() - t0:6.1f}s", flush=True)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=250)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--kind", default="bumpy_sphere")
    a = ap.parse_args()
    code = run_pipeline(a.out, a.frames, a.seed, a.iterations, a.resolution, a.kind)
    if code == 0:
        with open(os.path.join(a.out, "summary.tsv")) as f:
            sys.stdout.write(f.read())
    sys.exit(code)
