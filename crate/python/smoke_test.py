"""Smoke test for the pygraftmt extension.

Build and install first, for example:
    pip install maturin
    maturin develop -m crates/python/Cargo.toml
Then run: python python/smoke_test.py [path/to/model.ckpt]
"""

import sys

import pygraftmt


def main() -> None:
    assert "bart-frozen" in pygraftmt.recipes()

    report = pygraftmt.params("bart-frozen", "bart")
    assert report["first_encoder_self_attn_bias_free"] == 4 * 1024 * 1024
    print("bart-frozen trainable:", report["trainable"], "of", report["total"])

    subsets = {r: pygraftmt.params(r, "mbart")["subset_bias_free"] for r in ("ft-enc-attn", "ft-self-attn", "ft-last3")}
    assert set(subsets.values()) == {50_331_648}, subsets

    rows = pygraftmt.memory("mbart")
    assert rows[0][0] == "finetune-all"
    assert all(a[1] >= b[1] for a, b in zip(rows, rows[1:]))

    refs = ["the cat sat on the mat", "a dog ran"]
    assert abs(pygraftmt.bleu(refs, refs) - 100.0) < 1e-9
    assert pygraftmt.paired_bootstrap(refs, refs, refs, 200, 1) == 1.0
    try:
        pygraftmt.bleu(refs, refs[:1])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch must raise ValueError")

    if len(sys.argv) > 1:
        t = pygraftmt.Translator(sys.argv[1])
        out = t.translate(["a b c"], beam=2)
        assert len(out) == 1
        print("translation:", out[0])

    print("pygraftmt smoke test passed")


if __name__ == "__main__":
    main()
