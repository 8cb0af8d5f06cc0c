import numpy as np
import pytest

from hamsplat import autodiff as ad
from hamsplat import bed, gauss, hexplane, hnn, physics, pipeline, render
from hamsplat import cli


def tiny_cfg(**kw):
    base = dict(iterations=5, base_resolution=8, upsampling=(2,), plane_channels=2,
                decoder_width=16, log_every=2, seed=3)
    base.update(kw)
    return pipeline.TrainConfig(**base)


@pytest.fixture(scope="module")
def mixed_toy():
    return pipeline.synth_scene("mixed", n_frames=5, n_gaussians=24, resolution=24, seed=1)


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_cfg()
        back = pipeline.config_from_text(pipeline.config_to_text(cfg))
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(pipeline.ConfigError, match="unknown config key"):
            pipeline.config_from_text("iterations=10\nwibble=3\n")

    def test_comments_and_blank_lines(self):
        cfg = pipeline.config_from_text("# a comment\n\niterations=7\nupsampling=2,4\n")
        assert cfg.iterations == 7 and cfg.upsampling == (2, 4)

    def test_validation(self):
        with pytest.raises(pipeline.ConfigError):
            pipeline.TrainConfig(decoder_kind="nope")
        with pytest.raises(pipeline.ConfigError):
            pipeline.TrainConfig(encoder_lr=0.0)

    def test_eq_lr_follows_position(self):
        cfg = tiny_cfg(position_lr=0.123)
        assert cfg.eq_lr_effective == 0.123
        cfg = tiny_cfg(position_lr=0.123, eq_lr=0.5)
        assert cfg.eq_lr_effective == 0.5


class TestSynth:
    def test_single_frame_static(self):
        ds, scene = pipeline.synth_scene("orbit", n_frames=1, n_gaussians=10,
                                         resolution=16, seed=0)
        assert len(ds) == 1 and ds.frames[0].t == 0.0

    def test_pendulum_energy_constant(self):
        ds, _ = pipeline.synth_scene("pendulum", n_frames=12, n_gaussians=8,
                                     resolution=16, seed=0)
        energy = ds.meta["energy"]
        vals = np.array([energy(f.t) for f in ds.frames])
        assert np.max(np.abs(vals - vals[0])) < 1e-10

    def test_mixed_static_half_fixed(self):
        ds, _ = pipeline.synth_scene("mixed", n_frames=6, n_gaussians=20,
                                     resolution=16, seed=0)
        n_static = ds.meta["n_static"]
        base = ds.frames[0].gt_positions
        moved = 0.0
        for f in ds.frames[1:]:
            assert np.array_equal(f.gt_positions[:n_static], base[:n_static])
            moved = max(moved, np.max(np.abs(f.gt_positions[n_static:] - base[n_static:])))
        assert moved > 0.1

    def test_canonical_matches_first_frame(self):
        ds, scene = pipeline.synth_scene("pendulum", n_frames=5, n_gaussians=6,
                                         resolution=16, seed=0)
        assert np.allclose(scene.as_arrays()["mu"], ds.frames[0].gt_positions)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            pipeline.synth_scene("wat", 2, 2, 16)


class TestDatasetIo:
    def test_round_trip(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        pipeline.save_dataset(ds, tmp_path, init_scene=scene)
        back = pipeline.load_dataset(tmp_path)
        assert len(back) == len(ds)
        for a, b in zip(ds.frames, back.frames):
            assert a.t == b.t
            assert np.allclose(a.camera.view, b.camera.view)
            assert (a.camera.fx, a.camera.fy) == (b.camera.fx, b.camera.fy)
            # PPM quantizes to 8 bits
            assert np.max(np.abs(a.image.rgb - b.image.rgb)) <= 1.0 / 255.0 + 1e-12
            assert np.allclose(a.gt_positions, b.gt_positions, atol=1e-12)
        init = pipeline.load_init_scene(tmp_path)
        assert len(init) == len(scene)

    def test_bad_cam_file(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        pipeline.save_dataset(ds, tmp_path)
        cam = next((tmp_path / "frames").glob("*.cam"))
        cam.write_text("1 2 3\n")
        with pytest.raises(ValueError, match="23 numbers"):
            pipeline.load_dataset(tmp_path)

    def test_timestamps_must_be_sorted(self):
        cam = render.Camera.look_at(eye=(0, 0, 4), target=(0, 0, 0), width=16, height=16)
        img = render.ImageBuffer(np.zeros((16, 16, 3)))
        with pytest.raises(ValueError):
            pipeline.FrameDataset([pipeline.Frame(0.5, cam, img),
                                   pipeline.Frame(0.2, cam, img)])


class TestDeformScene:
    def setup_model(self, scene, cfg=None):
        cfg = cfg or tiny_cfg()
        encoder, decoder = pipeline.build_model(cfg, scene.bounds)
        bed_cfg = pipeline._resolve_bed(cfg, scene.bounds)
        phys_cfg = physics.IntegratorConfig(dt=0.25, phi_max=0.35)
        return encoder, decoder, bed_cfg, phys_cfg

    def test_zero_decoder_is_identity(self, mixed_toy):
        _, scene = mixed_toy
        encoder, decoder, bed_cfg, phys_cfg = self.setup_model(scene)
        decoder.zero_heads()
        out = pipeline.deform_scene(scene, 0.4, encoder, decoder, bed_cfg, phys_cfg)
        a, b = scene.as_arrays(), out.as_arrays()
        for k in a:
            assert np.allclose(a[k], b[k], atol=1e-12), k

    def test_masks_at_equilibrium_freeze_positions(self, mixed_toy):
        # E = 0 (mu_eq = mu, t = t_eq) -> M = 1 -> positions/scales unchanged
        # regardless of what the decoder predicts
        _, scene = mixed_toy
        cfg = tiny_cfg()
        encoder, decoder, bed_cfg, phys_cfg = self.setup_model(scene, cfg)
        rng = np.random.default_rng(5)
        w = decoder.cfg.width
        decoder.adapt_mu = ad.leaf(rng.normal(size=(w, 3)))
        decoder.adapt_s = ad.leaf(rng.normal(size=(w, 3)))
        t = 0.8
        arrays = scene.as_arrays()
        arrays["t_eq_pos"][:] = t
        arrays["t_eq_scale"][:] = t
        scene_eq = gauss.Scene.from_arrays(arrays, scene.bounds)
        out = pipeline.deform_scene(scene_eq, t, encoder, decoder, bed_cfg, phys_cfg)
        got = out.as_arrays()
        assert np.allclose(got["mu"], arrays["mu"], atol=1e-12)
        assert np.allclose(got["log_scale"], arrays["log_scale"], atol=1e-12)

    def test_call_order_traced(self, mixed_toy):
        _, scene = mixed_toy
        encoder, decoder, bed_cfg, phys_cfg = self.setup_model(scene)
        trace = []
        arrays = {k: ad.constant(v) for k, v in scene.as_arrays().items()}
        with ad.no_grad():
            pipeline._deform_attrs(arrays, 0.3, scene.bounds, encoder, decoder,
                                   bed_cfg, phys_cfg, trace=trace)
        assert trace == ["encode", "latent", "vector_fields", "deform", "force",
                         "verlet", "masks", "blend_position", "blend_scale",
                         "clamp_rotation", "apply_rotation"]
        # symplectic step precedes mask blending
        assert trace.index("verlet") < trace.index("blend_position")

    def test_opacity_color_untouched(self, mixed_toy):
        _, scene = mixed_toy
        encoder, decoder, bed_cfg, phys_cfg = self.setup_model(scene)
        rng = np.random.default_rng(6)
        w = decoder.cfg.width
        decoder.adapt_mu = ad.leaf(rng.normal(size=(w, 3)) * 0.1)
        out = pipeline.deform_scene(scene, 0.9, encoder, decoder, bed_cfg, phys_cfg)
        assert np.array_equal(out.as_arrays()["opacity_logit"],
                              scene.as_arrays()["opacity_logit"])
        assert np.array_equal(out.as_arrays()["color"], scene.as_arrays()["color"])

    def test_rejects_bad_timestamp(self, mixed_toy):
        _, scene = mixed_toy
        encoder, decoder, bed_cfg, phys_cfg = self.setup_model(scene)
        with pytest.raises(ValueError):
            pipeline.deform_scene(scene, 1.5, encoder, decoder, bed_cfg, phys_cfg)


class TestTrain:
    def test_zero_iterations_is_initialization(self, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=0)
        ck = pipeline.train(cfg, ds, scene)
        assert ck.iteration == 0
        assert np.array_equal(ck.arrays["scene.mu"], scene.as_arrays()["mu"])
        encoder, _ = pipeline.build_model(cfg, scene.bounds)
        for name, t in encoder.params():
            assert np.array_equal(ck.arrays["enc." + name], t.data)

    def test_loss_decreases_on_average(self, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=300, log_every=1,
                       base_resolution=8, upsampling=(), plane_channels=2)
        losses = []
        pipeline.train(cfg, ds, scene, on_log=lambda i, l, p: losses.append(l))
        first = np.mean(losses[:50])
        last = np.mean(losses[-50:])
        assert last <= first

    def test_deterministic_checkpoints(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=12)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        pipeline.train(cfg, ds, scene, out_path=p1)
        pipeline.train(cfg, ds, scene, out_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_sequential_frame_order(self, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=4, frame_order="sequential")
        pipeline.train(cfg, ds, scene)

    def test_batch_size(self, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=3, batch_size=2)
        pipeline.train(cfg, ds, scene)

    def test_empty_dataset_rejected(self, mixed_toy):
        _, scene = mixed_toy
        with pytest.raises(ValueError):
            pipeline.train(tiny_cfg(), pipeline.FrameDataset([]), scene)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        ck = pipeline.train(tiny_cfg(iterations=6), ds, scene)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        pipeline.save_checkpoint(ck, p1)
        back = pipeline.load_checkpoint(p1)
        pipeline.save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert back.cfg == ck.cfg and back.iteration == ck.iteration

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            pipeline.load_checkpoint(p)

    def test_model_round_trip_renders_identically(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        ck = pipeline.train(tiny_cfg(iterations=6), ds, scene)
        path = tmp_path / "m.ckpt"
        pipeline.save_checkpoint(ck, path)
        rows1 = pipeline.evaluate(ck, ds)
        rows2 = pipeline.evaluate(pipeline.load_checkpoint(path), ds)
        assert rows1 == rows2


class TestEvaluate:
    def test_self_eval_inf_psnr(self, mixed_toy):
        ds, scene = mixed_toy
        cfg = tiny_cfg(iterations=0)
        ck = pipeline.train(cfg, ds, scene)
        # dataset whose frames are exactly the zero-deformation renders
        scene2, enc, dec, bcfg, pcfg = pipeline.model_from_checkpoint(ck)
        frames = []
        for f in ds.frames:
            deformed = pipeline.deform_scene(scene2, f.t, enc, dec, bcfg, pcfg)
            img = render.rasterize(deformed, f.camera, background=cfg.background)
            frames.append(pipeline.Frame(f.t, f.camera, img))
        ds_self = pipeline.FrameDataset(frames)
        rows = pipeline.evaluate(ck, ds_self)
        for (_, _, p, s) in rows:
            assert p == float("inf")
            assert s == pytest.approx(1.0, abs=1e-12)

    def test_csv_deterministic_and_mean(self, mixed_toy):
        ds, scene = mixed_toy
        ck = pipeline.train(tiny_cfg(iterations=4), ds, scene)
        rows = pipeline.evaluate(ck, ds)
        csv1 = pipeline.eval_to_csv(rows)
        csv2 = pipeline.eval_to_csv(pipeline.evaluate(ck, ds))
        assert csv1 == csv2
        mean_line = csv1.strip().splitlines()[-1].split(",")
        assert float(mean_line[2]) == pytest.approx(np.mean([r[2] for r in rows]))
        assert float(mean_line[3]) == pytest.approx(np.mean([r[3] for r in rows]))


class TestRenderSequence:
    def test_empty_timestamps(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        ck = pipeline.train(tiny_cfg(iterations=2), ds, scene)
        imgs, traj = pipeline.render_sequence(ck, [ds.frames[0].camera], [],
                                              out_dir=tmp_path / "seq")
        assert imgs == [] and traj == []
        csv = pipeline.trajectory_to_csv(traj)
        assert csv == "t,id,x,y,z\n"

    def test_single_timestamp(self, tmp_path, mixed_toy):
        ds, scene = mixed_toy
        ck = pipeline.train(tiny_cfg(iterations=2), ds, scene)
        imgs, traj = pipeline.render_sequence(ck, [ds.frames[0].camera], [0.5],
                                              out_dir=tmp_path / "seq")
        assert len(imgs) == 1
        assert (tmp_path / "seq" / "0000.ppm").exists()
        assert len(traj) == len(scene)
        assert pipeline.trajectory_to_csv(traj).startswith("t,id,x,y,z\n0.5,0,")


class TestCli:
    def test_synth_train_eval_render_sweep(self, tmp_path):
        data = tmp_path / "data"
        cli.main(["synth", "--kind", "mixed", "--frames", "4", "--gaussians", "12",
                  "--resolution", "16", "--seed", "2", "--out", str(data)])
        assert (data / "init.ply").exists()
        assert len(list((data / "frames").glob("*.ppm"))) == 4

        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text("iterations=4\nbase_resolution=8\nupsampling=2\n"
                            "plane_channels=2\ndecoder_width=16\nlambda_dssim=0.2\n")
        ckpt = tmp_path / "model.ckpt"
        cli.main(["train", "--config", str(cfg_path), "--data", str(data),
                  "--out", str(ckpt)])
        assert ckpt.exists()

        out_csv = tmp_path / "eval.csv"
        cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                  "--out", str(out_csv)])
        assert out_csv.read_text().startswith("frame,t,psnr,ssim")

        frames_out = tmp_path / "frames_out"
        traj_csv = tmp_path / "traj.csv"
        cli.main(["render", "--ckpt", str(ckpt), "--data", str(data),
                  "--out", str(frames_out), "--traj", str(traj_csv)])
        assert len(list(frames_out.glob("*.ppm"))) == 4
        assert traj_csv.read_text().startswith("t,id,x,y,z")

        lod = tmp_path / "lod"
        cli.main(["stream-pack", "--data", str(data), "--out", str(lod),
                  "--layers", "1", "--iters", "5", "--new-per-layer", "4"])
        assert (lod / "manifest.txt").exists()
        sweep_csv = tmp_path / "sweep.csv"
        cli.main(["stream-sweep", "--layered", str(lod), "--data", str(data),
                  "--out", str(sweep_csv)])
        lines = sweep_csv.read_text().strip().splitlines()
        assert lines[0] == "level,count,bytes,psnr" and len(lines) == 3

    def test_helmholtz_check(self, tmp_path, capsys):
        out = tmp_path / "field.csv"
        cli.main(["helmholtz-check", "--n", "8", "--out", str(out)])
        captured = capsys.readouterr()
        assert "reconstruction max err" in captured.out
        assert out.read_text().startswith("i,j,k,")
