"""Write one of the canned scenes as a scene JSON for ``dynobs synth``."""

from __future__ import annotations

import argparse

from dynobs.scenes import benchmark_scene, close_pair_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("name", choices=("benchmark", "close_pair"))
    ap.add_argument("out", help="scene JSON path")
    ap.add_argument("--duration", type=float, default=30.0, help="benchmark only")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-noise", action="store_true", help="benchmark only")
    args = ap.parse_args()
    if args.name == "benchmark":
        scene = benchmark_scene(args.duration, seed=args.seed, noise=not args.no_noise)
    else:
        scene = close_pair_scene(args.seed)
    scene.save(args.out)
    print(f"wrote {args.out}: {len(scene.statics)} static, {len(scene.dynamics)} dynamic objects, {len(scene.stamps)} frames")


if __name__ == "__main__":
    main()
