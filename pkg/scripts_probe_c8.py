import time
import numpy as np
from hamsplat import pipeline, render

ds, canonical = pipeline.synth_scene("mixed", n_frames=20, n_gaussians=300, resolution=64, seed=7)


def run(tag, iters=5000, **kw):
    base = dict(iterations=iters, base_resolution=32, upsampling=(2,),
                plane_channels=4, decoder_width=32, seed=11, log_every=250)
    base.update(kw)
    cfg = pipeline.TrainConfig(**base)
    t0 = time.time()
    hist = []
    ck = pipeline.train(cfg, ds, canonical, on_log=lambda i, l, p: hist.append((i, l, p)))
    rows = pipeline.evaluate(ck, ds)
    psnrs = np.array([r[2] for r in rows])
    print(f"{tag}: mean {psnrs.mean():.2f} dB ({time.time()-t0:.0f}s)", flush=True)
    print("  loss curve:", [f"{i}:{l:.4f}" for i, l, p in hist[::4]], flush=True)
    scene, enc, dec, bcfg, pcfg = pipeline.model_from_checkpoint(ck)
    arr = scene.as_arrays()
    dev = np.linalg.norm(arr["mu"] - arr["mu_eq"], axis=1)
    print(f"  |mu-mu_eq|: med {np.median(dev):.4f} max {dev.max():.4f}  "
          f"t_eq_pos range [{arr['t_eq_pos'].min():.2f},{arr['t_eq_pos'].max():.2f}]",
          flush=True)
    op = 1 / (1 + np.exp(-arr["opacity_logit"]))
    print(f"  opacity med {np.median(op):.3f} min {op.min():.3f}", flush=True)
    return psnrs.mean()


run("long-default-eq", dt=1.0, bed_gamma=0.01, sigma_t=0.5)
run("long-frozen-eq", dt=1.0, bed_gamma=0.01, sigma_t=0.5, eq_lr=1e-9)
run("long-decayed-lrs", dt=1.0, bed_gamma=0.01, sigma_t=0.5,
    position_lr=5e-5, opacity_lr=0.01, color_lr=0.001, scale_lr=0.002)
