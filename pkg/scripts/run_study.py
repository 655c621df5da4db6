"""Five-seed synthetic long-tail study (plain / pcl / hyper / full).

    python3 scripts/run_study.py                 # default desk settings, seeds 1..5
    python3 scripts/run_study.py --seeds 1 2     # subset
    python3 scripts/run_study.py --quick         # small smoke version

Per-variant results are cached, so reruns only train what is missing.
"""

import argparse
import dataclasses
import logging

import numpy as np
import torch

from fend.experiments import StudySettings, VARIANTS, run_study


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--root", default="results/study")
    p.add_argument("--quick", action="store_true", help="tiny dataset and schedule for a smoke run")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    st = StudySettings(seeds=tuple(args.seeds))
    if args.quick:
        st = dataclasses.replace(
            st, n=600,
            extractor=dataclasses.replace(st.extractor, epochs=2, embed_dim=16, aux_levels=(5, 10)),
            cluster=dataclasses.replace(st.cluster, levels=(5, 10)),
            train=dataclasses.replace(st.train, epochs=6, warmup_epochs=3, a_switch_epoch=1),
        )
    summary = run_study(st, args.root)

    print(f"{'seed':>4} " + " ".join(f"{v + ' top5/all':>20}" for v in VARIANTS))
    for seed, row in summary.items():
        cells = [f"{row[v]['top5_fde']:9.3f}/{row[v]['all_ade']:.3f}" for v in VARIANTS]
        print(f"{seed:>4} " + " ".join(f"{c:>20}" for c in cells))
    for v in VARIANTS:
        t5 = np.mean([row[v]["top5_fde"] for row in summary.values()])
        sil = np.mean([row[v]["tail_silhouette"] for row in summary.values()])
        print(f"{v:>6}: mean top5 minFDE {t5:.3f}  mean tail silhouette {sil:.3f}")


if __name__ == "__main__":
    main()
