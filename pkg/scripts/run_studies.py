"""Run the robustness and design studies at reduced epochs and write their CSVs.

    python scripts/run_studies.py --out runs/studies --studies noise der ablation
"""
import argparse
import logging
from pathlib import Path

from faultxformer import experiments as ex
from faultxformer.phasor_sim import GeneratorConfig
from faultxformer.pipeline import task_subset
from faultxformer.training import encode

STUDIES = ("noise", "der", "ablation", "attention", "latency")
EPOCHS = {"type": (6, 10), "location": (25, 6)}


def stage_configs(task: str, seed: int) -> ex.StageConfigs:
    e1, e2 = EPOCHS[task]
    return ex.StageConfigs(task, e1, e2, seed=seed, dropout_p=0.0)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/studies")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--studies", nargs="+", choices=STUDIES, default=list(STUDIES))
    parser.add_argument("--tasks", nargs="+", choices=("type", "location"),
                        default=["type", "location"])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = ex.make_run_dir(args.out, "studies", args.seed)
    gen = GeneratorConfig(seed=args.seed)
    ex.write_run_manifest(out, {"studies": ",".join(args.studies),
                                "tasks": ",".join(args.tasks)}, args.seed)
    clean_type = None
    for task in args.tasks:
        cfg = stage_configs(task, args.seed)
        if "noise" in args.studies:
            rows = ex.noise_sweep(gen, cfg, levels=(1, 2, 3))
            ex.write_sweep_csv(rows, out / f"noise-{task}.csv")
            if task == "type":
                clean_type = rows[0].model
        if "ablation" in args.studies:
            inputs, _ = ex.build_inputs(gen)
            rows = []
            for axis in ex.ABLATION_GRID:
                rows += ex.ablation(ex.SweepSpec(axis, base_config=cfg, seed=args.seed), inputs)
            ex.write_ablation_csv(rows, out / f"ablation-{task}.csv")
    if "der" in args.studies:
        rows = ex.der_sweep(gen, stage_configs("type", args.seed), tasks=tuple(args.tasks))
        ex.write_der_csv(rows, out / "der.csv", tasks=tuple(args.tasks))
    if "attention" in args.studies or "latency" in args.studies:
        if clean_type is None:
            inputs, _ = ex.build_inputs(gen)
            clean_type = ex.fit_dual(inputs, stage_configs("type", args.seed)).model
        if "attention" in args.studies:
            inputs, _ = ex.build_inputs(gen)
            faulted = task_subset(inputs, "location")
            clean_type.classifier.capture_attention(True)
            _, ratio = ex.attention_export(clean_type.classifier,
                                           encode(clean_type.extractor, faulted.features), out)
            print(f"attention onset/off-fault ratio {ratio:.3f}")
        if "latency" in args.studies:
            report = ex.latency_bench(clean_type)
            report.write_csv(out / "latency.csv")
            print("\n".join(report.lines()))
    print(f"results in {Path(out)}")


if __name__ == "__main__":
    main()
