"""
Retrieval against a frozen caption gallery
==========================================

The gallery embeddings are computed once and never re-encoded. A student
trained with the image-alignment term moves its image embeddings towards the
teacher space the gallery lives in, so image-to-text and text-to-image recall
improve, while the gallery file itself stays byte-identical.
"""

import tempfile
from pathlib import Path

from protodistill import files, pipeline
from protodistill.synth import SynthSpec

with tempfile.TemporaryDirectory() as tmp:
    data = Path(tmp)
    pipeline.gen_synth(SynthSpec(seed=0), data)
    annotated, _ = pipeline.flag_captions(data / "captions.json", pipeline.load_config().rules)
    files.write_caption_file(data / "flagged.json", annotated)
    digest = pipeline.sha256_file(data / "gallery.jsonl")

    for preset in ("B0", "B7"):
        cfg = pipeline.load_config(preset)
        protos = pipeline.aggregate(data, data / "flagged.json", cfg)
        state = pipeline.run_training(data, cfg, protos if preset != "B0" else None)
        files.write_checkpoint(data / "ck.json", pipeline.config_to_dict(cfg), state.step, cfg.seed, state.model)
        rep = pipeline.evaluate(data, files.read_checkpoint(data / "ck.json"), "retrieval")
        print(preset, pipeline.render_table(rep), sep="\n")
        print()

    print("gallery unchanged:", pipeline.sha256_file(data / "gallery.jsonl") == digest)
