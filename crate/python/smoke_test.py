"""Smoke test for the maskedclip_py extension.

Build it first with `pip install --no-build-isolation -e crates/py`.
"""

import math
import tempfile
from pathlib import Path

import maskedclip_py as mc


def main():
    bundle = mc.Bundle.generate(24, 24, classes=3, height=16, width=16, channels=1, max_text_len=8, seed=1)
    assert (bundle.num_paired, bundle.num_unpaired, bundle.num_classes) == (24, 24, 3)
    assert all(bundle.captions())

    trainer = mc.Trainer(bundle, variant="maskedclip", epochs=2, seed=0)
    first = trainer.step(bundle)
    assert set(first) == {"mim", "i2t", "t2i", "lg_clip", "mfd", "total"}
    totals = trainer.run(bundle)
    assert trainer.steps_taken == 1 + len(totals) == 6
    assert all(math.isfinite(t) for t in totals)
    assert trainer.step(bundle) is None

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bundle.mcdb"
        bundle.save(path)
        assert mc.Bundle.load(path).captions() == bundle.captions()
        trainer.save_checkpoint(Path(tmp) / "state.mclp")
        assert mc.Trainer.resume(Path(tmp) / "state.mclp").steps_taken == 6

    result = trainer.probe(bundle, label_fraction=1.0, seed=0)
    assert 0.0 <= result["macro_roc_auc"] <= 1.0

    assert mc.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    assert abs(mc.pr_auc([0.9, 0.8, 0.7], [True, False, True]) - 5 / 6) < 1e-12
    assert all(ok for _, _, _, ok in mc.losscheck())
    assert all(err <= 1e-4 for _, err in mc.gradcheck())
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
