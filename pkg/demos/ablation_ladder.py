"""
Ablation ladder on the synthetic benchmark
==========================================

Runs the bundled presets B0 (task loss only, shallow text prompts) through
B7 (all alignment terms, selective prototypes, warm-up) plus the two-stage
schedule, end to end through the CLI stages, and prints Base / Novel / HM.
A second table repeats B0 and B7 over several seeds, since single runs on
a 10-class toy problem are noisy.
"""

import tempfile
from pathlib import Path

from protodistill import files, pipeline
from protodistill.synth import SynthSpec

PRESETS = ["B0", "B1", "B2", "B3", "B4", "B5", "B6", "B7", "two_stage"]


def run(data, flagged, preset, seed):
    cfg = pipeline.load_config(preset, seed)
    protos = pipeline.aggregate(data, flagged, cfg)
    needs = cfg.distill.lambda_text > 0 or cfg.distill.lambda_logit > 0
    state = pipeline.run_training(data, cfg, protos if needs else None)
    ckpt = {"header": {"config": pipeline.config_to_dict(cfg), "step": state.step, "seed": seed},
            "vision_prompts": state.model.vision.prompts.tolist(),
            "text_prompts": state.model.text.prompts.tolist(),
            "log_tau_s": state.model.log_tau_s}
    return pipeline.evaluate(data, ckpt, "base2novel")


def prepare(root, seed):
    data = Path(root) / f"seed{seed}"
    pipeline.gen_synth(SynthSpec(seed=seed), data)
    annotated, _ = pipeline.flag_captions(data / "captions.json", pipeline.load_config().rules)
    files.write_caption_file(data / "flagged.json", annotated)
    return data, data / "flagged.json"


with tempfile.TemporaryDirectory() as tmp:
    data, flagged = prepare(tmp, 0)
    print("preset      Base   Novel     HM")
    for name in PRESETS:
        r = run(data, flagged, name, 0)
        print(f"{name:9s}  {r['base']:6.2f}  {r['novel']:6.2f}  {r['hm']:6.2f}")

    print("\nseed   HM(B0)  HM(B7)")
    wins = 0
    seeds = range(10)
    for seed in seeds:
        data, flagged = prepare(tmp, seed)
        a, b = run(data, flagged, "B0", seed), run(data, flagged, "B7", seed)
        wins += b["hm"] >= a["hm"]
        print(f"{seed:4d}  {a['hm']:6.2f}  {b['hm']:6.2f}")
    print(f"B7 >= B0 on HM for {wins}/{len(seeds)} seeds")
