import json

import numpy as np
import pytest
import torch

from renderctl import io
from renderctl.exceptions import ConfigurationError, ValidationError
from renderctl.field import SceneModel
from renderctl.lighting import SkyDecoder
from renderctl.synthdata import DatasetSpec, generate_dataset, make_scene


def test_exr_round_trip_layers(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 20, (5, 7, 3)).astype(np.float32)
    depth = rng.uniform(0, 3, (5, 7)).astype(np.float32)
    io.write_exr(tmp_path / "a.exr", {"RGB": rgb, "depth": depth})
    assert np.array_equal(io.read_exr(tmp_path / "a.exr", "RGB"), rgb)
    assert np.array_equal(io.read_exr(tmp_path / "a.exr", "depth"), depth)
    io.write_exr(tmp_path / "b.exr", rgb)
    assert np.array_equal(io.read_image(tmp_path / "b.exr"), rgb)


def test_png_and_mask(tmp_path):
    img = np.linspace(0, 1, 12 * 3).reshape(2, 6, 3)
    io.write_png(tmp_path / "p.png", img)
    back = io.read_image(tmp_path / "p.png")
    assert np.abs(back - img).max() < 0.03
    m = np.eye(4, dtype=bool)
    io.write_mask(tmp_path / "m.png", m)
    assert np.array_equal(io.read_mask(tmp_path / "m.png"), m)
    from PIL import Image
    Image.fromarray(np.full((3, 3), 100, np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(ValidationError):
        io.read_mask(tmp_path / "g.png")


def test_dataset_round_trip(tmp_path):
    scene = make_scene("minimal-sphere", 0)
    train, test = generate_dataset(scene, DatasetSpec(n_views=10, n_test=2, width=8, height=8),
                                   tmp_path)
    for split, ref in (("train", train), ("test", test)):
        ds = io.load_dataset(tmp_path, split)
        assert ds.frame_ids == ref.frame_ids
        assert np.array_equal(ds.images, ref.images)
        assert np.array_equal(ds.sky_masks, ref.sky_masks)
        assert np.array_equal(ds.occluder_masks, ref.occluder_masks)
        assert np.allclose(ds.cameras[0].pose, ref.cameras[0].pose)
    cams = json.loads((tmp_path / "cameras.json").read_text())
    assert len(cams["train_0000"]["pose"]) == 16
    manifest = json.loads((tmp_path / "gt_manifest.json").read_text())
    assert manifest["scene_hash"] == scene.hash()
    with pytest.raises(ValidationError):
        io.load_dataset(tmp_path / "nowhere")


def test_checkpoint_round_trip(tmp_path):
    model = SceneModel(["f0", "f1"], geometry_hidden=16, geometry_depth=2)
    with torch.no_grad():
        model.codes.tone[1] += 0.5
    dec = SkyDecoder(4, hidden=(8,)).freeze()
    io.save_checkpoint(tmp_path / "m.zip", model, dec, {"note": 1})
    m2, d2, meta = io.load_checkpoint(tmp_path / "m.zip")
    for (k, a), (_, b) in zip(model.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    assert d2.frozen and meta["note"] == 1
    assert torch.equal(d2(torch.zeros(1, 4)), dec(torch.zeros(1, 4)))


def test_archive_rejects_garbage(tmp_path):
    (tmp_path / "bad.zip").write_bytes(b"not a zip")
    with pytest.raises(ConfigurationError):
        io.load_archive(tmp_path / "bad.zip")
    dec = SkyDecoder(4, hidden=(8,))
    io.save_decoder(tmp_path / "d.zip", dec)
    with pytest.raises(ConfigurationError):
        io.load_checkpoint(tmp_path / "d.zip")


def test_load_config(tmp_path):
    (tmp_path / "c.toml").write_text('[data]\npreset = "facade-like"\nn_views = 12\n')
    assert io.load_config(tmp_path / "c.toml")["data"]["n_views"] == 12
    (tmp_path / "c.json").write_text('{"data": {"n_views": 3}}')
    assert io.load_config(tmp_path / "c.json")["data"]["n_views"] == 3
    (tmp_path / "bad.toml").write_text("[data\n")
    with pytest.raises(ConfigurationError):
        io.load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigurationError):
        io.load_config(tmp_path / "missing.toml")


def test_jsonl_logger(tmp_path):
    log = io.JsonlLogger(tmp_path / "log.jsonl")
    log({"step": 0, "loss": 1.0})
    log({"step": 1, "loss": 0.5})
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1]
