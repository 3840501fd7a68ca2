"""Quick end-to-end check of the Python bindings.

Build and install the extension first, e.g.

    cd crates/py && maturin develop --release

then run `python python/smoke_test.py`.
"""

import json
import math
import os
import tempfile

import capdet_py as cd


def main():
    scene = cd.generate_scene(7, image_size=64, max_objects=2)
    assert scene.image.width == scene.image.height == 64
    assert len(scene.boxes) == len(scene.labels) >= 1
    assert len(scene.captions) == 5
    again = cd.generate_scene(7, image_size=64, max_objects=2)
    assert again.captions == scene.captions and again.image.data() == scene.image.data()

    vocab = cd.Vocabulary.scenes()
    ids = vocab.tokenize(scene.captions[0])
    assert vocab.detokenize(ids) == scene.captions[0]

    assert cd.bleu(["a red circle"], [["a red circle"]], 1) == 1.0
    assert 0.0 < cd.rouge_l(["a red circle"], [["a blue circle"]]) < 1.0
    c = cd.cider(["a red circle", "a blue square"], [["a red circle"], ["a blue square"]])
    assert math.isfinite(c)

    box = (10.0, 10.0, 60.0, 60.0)
    assert cd.iou(box, box) == 1.0
    report = cd.coco_map([[(box, 0, 0.9)]], [[(box, 0)]], 1, 128)
    assert report["mAP"] == 1.0 and report["AP50"] == 1.0

    model = cd.Model.toy(seed=0)
    assert model.image_size == 128 and model.num_parameters > 0
    scenes = cd.generate_dataset(0, 4)
    with tempfile.TemporaryDirectory() as out:
        losses = model.train(scenes, out, steps=3)
        assert len(losses) == 3 and all(math.isfinite(x) for x in losses)
        with open(os.path.join(out, "metrics.jsonl")) as f:
            assert [json.loads(line)["step"] for line in f] == [1, 2, 3]
        trained = cd.Model.load(os.path.join(out, "checkpoint.bin"))
        text, logprob = trained.caption(scenes[0].image, beam=2)
        assert isinstance(text, str) and logprob <= 0.0
        for b, cls, score in trained.detect(scenes[0].image):
            assert 0 <= cls < 4 and 0.0 <= score <= 1.0 and b[2] >= b[0]

    assert cd.run_cli(["train", "--out", "x", "--lambda", "often"]) == 1
    print("smoke test passed")


if __name__ == "__main__":
    main()
