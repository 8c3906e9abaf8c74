import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src import synthetic  # noqa: E402
from src.config import load_settings  # noqa: E402
from src.data import DEMOS_DIR  # noqa: E402
from src.formats import write_rgbd  # noqa: E402
from src.planner import write_world  # noqa: E402


def make_skill(out: Path, seed: int, variation: str | None, config: Path | None, scenario: str, held_out: int) -> None:
    settings = load_settings(config)
    if variation is not None:
        settings = replace(settings, synthetic=replace(settings.synthetic, variation=variation))
    task = synthetic.generate_synthetic_task(seed, settings.synthetic)
    root = synthetic.write_task(task, out, scenario, settings.proposal)
    for i in range(held_out):
        scene = synthetic.held_out_scene(task, i)
        scene_dir = root.parent / f"{root.name}_scene_{i:02d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        write_rgbd(scene_dir / "obs", scene.image)
        write_world(scene_dir / "world.txt", scene.world)
        entry = synthetic.coarse_region_entry(scene, settings.proposal)
        (scene_dir / "scenario.json").write_text(json.dumps([entry], indent=1) + "\n", encoding="utf-8")
    print(f"Wrote {len(list((root / DEMOS_DIR).iterdir()))} demonstrations to {root} ({task.variation}, seed {seed})")


def main():
    parser = argparse.ArgumentParser(description="Write a synthetic skill dataset directory (plus held-out scenes)")
    parser.add_argument("out", type=Path, help="Output skill directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--variation", choices=list(synthetic.VARIATIONS))
    parser.add_argument("--scenario", choices=list(synthetic.SCENARIO_KINDS), default="consistent")
    parser.add_argument("--held-out", type=int, default=1, help="Held-out scenes written next to the skill")
    parser.add_argument("--config", type=Path)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    make_skill(args.out, args.seed, args.variation, args.config, args.scenario, args.held_out)


if __name__ == "__main__":
    main()
