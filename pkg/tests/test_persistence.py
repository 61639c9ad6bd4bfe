import struct

import numpy as np
import pytest

from binmask import persistence as P
from binmask.training import TrainConfig, evaluate, finetune, model_from_checkpoint, model_from_masks, train_masks
from binmask.masking import MaskingConfig
from binmask.model import MaskPlan


def _art(rng, shapes=((3, 5), (8, 8), (1, 1))):
    masks = {f"l{i}": (rng.random(s) < 0.5).astype(np.uint8) for i, s in enumerate(shapes)}
    return P.MaskArtifact(0.5, {"blocks": [0]}, {"tau": 0.5}, masks,
                          {"classifier.weight": rng.standard_normal((4, 2)).astype(np.float32)}, {"k": 1})


def test_checkpoint_roundtrip_bitwise(tmp_path, pretrained):
    f = tmp_path / "a.mwck"
    P.save_checkpoint(pretrained, f)
    back = P.load_checkpoint(f)
    assert back.config == pretrained.config
    assert list(back.params) == list(pretrained.params)
    for n, a in pretrained.params.items():
        assert np.array_equal(back.params[n].view(np.uint32), np.asarray(a, np.float32).view(np.uint32))
    P.save_checkpoint(back, tmp_path / "b.mwck")
    assert (tmp_path / "b.mwck").read_bytes() == f.read_bytes()
    assert P.sniff(f) == "checkpoint"


def test_maskfile_roundtrip_bitwise(tmp_path, rng):
    art = _art(rng)
    f = tmp_path / "m.mskb"
    P.save_maskfile(art, f)
    back = P.load_maskfile(f)
    for n, m in art.masks.items():
        assert np.array_equal(back.masks[n], m)
    assert np.array_equal(back.floats["classifier.weight"], art.floats["classifier.weight"])
    assert back.meta == art.meta and back.plan == art.plan and back.tau == 0.5
    assert P.maskfile_bytes(back) == f.read_bytes()
    assert P.sniff(f) == "maskfile"


def test_mask_payload_sizes():
    assert P.mask_payload_bytes(768, 768) == 73_728
    assert P.mask_payload_bytes(3, 3) == 2
    art = P.MaskArtifact(0.5, {}, {}, {"w": np.ones((768, 768), np.uint8)})
    empty = P.MaskArtifact(0.5, {}, {}, {"w": np.ones((0, 0), np.uint8)})
    assert len(P.maskfile_bytes(art)) - len(P.maskfile_bytes(empty)) == 73_728


def test_bit_layout_lsb_first():
    m = np.zeros((1, 10), np.uint8)
    m[0, 0] = m[0, 9] = 1
    blob = P.maskfile_bytes(P.MaskArtifact(0.5, {}, {}, {"w": m}))
    # payload sits right before the float-tensor count
    assert blob[-6:-4] == bytes([0b00000001, 0b00000010])


def test_truncated_names_lengths(tmp_path, pretrained):
    blob = P.checkpoint_bytes(pretrained)
    with pytest.raises(P.FormatError, match=rf"needs \d+ bytes, file has {len(blob) - 7}"):
        P.parse_checkpoint(blob[:-7])
    with pytest.raises(P.FormatError, match="truncated"):
        P.parse_maskfile(P.maskfile_bytes(_art(np.random.default_rng(0)))[:30])


def test_bad_magic_and_version(pretrained):
    blob = P.checkpoint_bytes(pretrained)
    with pytest.raises(P.FormatError, match="bad magic.*offset 0"):
        P.parse_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(P.FormatError, match="version 9"):
        P.parse_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(P.FormatError, match="trailing"):
        P.parse_checkpoint(blob + b"\0")


def _tiny_ckpt_blob(offsets, dims=(2,), plen=8):
    cfg = b"{}"
    parts = [b"MWCK", struct.pack("<I", 1), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(offsets))]
    for i, off in enumerate(offsets):
        nm = f"t{i}".encode()
        parts += [struct.pack("<H", len(nm)), nm, struct.pack("<B", len(dims)),
                  struct.pack(f"<{len(dims)}I", *dims), struct.pack("<Q", off)]
    parts += [struct.pack("<Q", plen), b"\0" * plen]
    return b"".join(parts)


def test_manifest_bounds_and_overlap():
    assert set(P.parse_checkpoint(_tiny_ckpt_blob([0], plen=8)).params) == {"t0"}
    with pytest.raises(P.FormatError, match="exceeds payload"):
        P.parse_checkpoint(_tiny_ckpt_blob([4], plen=8))
    with pytest.raises(P.FormatError, match="overlap"):
        P.parse_checkpoint(_tiny_ckpt_blob([0, 4], plen=16))


def test_padding_bits_rejected():
    m = np.ones((1, 3), np.uint8)
    blob = bytearray(P.maskfile_bytes(P.MaskArtifact(0.5, {}, {}, {"w": m})))
    at = len(blob) - 5  # single payload byte, then u32 float count
    assert blob[at] == 0b111
    blob[at] |= 0b1000
    with pytest.raises(P.FormatError, match="padding"):
        P.parse_maskfile(bytes(blob))


def test_non_binary_mask_refused():
    with pytest.raises(ValueError):
        P.maskfile_bytes(P.MaskArtifact(0.5, {}, {}, {"w": np.full((2, 2), 2, np.uint8)}))


def test_reconstruction_reproduces_dev_metric(tmp_path, pretrained, cls_task):
    cfg = TrainConfig(lr=1e-3, regime="mask", seed=3, max_epochs=2,
                      masking=MaskingConfig(init_sparsity=0.3, seed=3), plan=MaskPlan.parse("all", 2))
    art, res = train_masks(pretrained, cls_task, cfg)
    P.save_maskfile(art, tmp_path / "t.mskb")
    P.save_checkpoint(pretrained, tmp_path / "p.mwck")
    model = model_from_masks(P.load_checkpoint(tmp_path / "p.mwck"), P.load_maskfile(tmp_path / "t.mskb"))
    assert evaluate(model, cls_task, res.metric) == art.meta["dev_metric"] == res.best_dev

    ck, res = finetune(pretrained, cls_task, TrainConfig(lr=1e-3, seed=3, max_epochs=2))
    P.save_checkpoint(ck, tmp_path / "f.mwck")
    model = model_from_checkpoint(P.load_checkpoint(tmp_path / "f.mwck"))
    assert evaluate(model, cls_task, res.metric) == ck.config["dev_metric"]


def test_report_roundtrip(tmp_path):
    fields = {"a": 1, "b": 0.1, "c": {"x": [1, 2]}, "d": "text"}
    tables = {"t": (["p", "acc"], [[0.05, 0.9], [0.95, 0.6]])}
    P.write_report(tmp_path / "r.txt", fields, tables)
    f, t = P.parse_report((tmp_path / "r.txt").read_text())
    assert f == {"a": "1", "b": "0.1", "c": '{"x":[1,2]}', "d": "text"}
    assert t == {"t": (["p", "acc"], [["0.05", "0.9"], ["0.95", "0.6"]])}
