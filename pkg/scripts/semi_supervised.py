"""Semi-supervised motion learning: held-out mAP after stage 1 and after stage 2.

For each seed a training scene is simulated, a fraction of its frames is
labeled, the motion model is trained from a drift-free start, and both
training stages are scored by particle-filter mAP on a held-out scene.

    python3 scripts/semi_supervised.py --config configs/semi_supervised.cfg
"""
import argparse

import numpy as np

from bayes_d2t.config import RunConfig
from bayes_d2t.experiments import semi_supervised_study
from bayes_d2t.particle_filter import thread_count


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/semi_supervised.cfg")
    parser.add_argument("--set", action="append", default=[], metavar="K=V")
    args = parser.parse_args()

    cfg = RunConfig.load(args.config, args.set)
    outcomes = semi_supervised_study(cfg, workers=thread_count())
    print(f"{'seed':>6}{'stage 1':>10}{'stage 2':>10}{'gain':>10}  learned b")
    for o in outcomes:
        b = np.array2string(o.stage2_params.motion.b, precision=2, suppress_small=True)
        print(f"{o.seed:>6}{o.stage1_map:>10.4f}{o.stage2_map:>10.4f}{o.gain:>+10.4f}  {b}")
    gains = np.array([o.gain for o in outcomes])
    print(f"mean gain {gains.mean():+.4f}, {int(np.sum(gains > 0))} of {gains.size} seeds improved "
          f"(true b = {cfg['model.motion.b']})")


if __name__ == "__main__":
    main()
