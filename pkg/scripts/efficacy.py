"""Train the tiny SS-Attention model and its m=0 baseline on synthetic textures.

    python scripts/efficacy.py --steps 2000 --out runs/efficacy
"""
import argparse
import dataclasses
import json
from pathlib import Path

from ssbsn.experiments import EfficacyConfig, attention_probe, efficacy_run
from ssbsn.network import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = EfficacyConfig()
    for f in dataclasses.fields(EfficacyConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                        default=getattr(defaults, f.name))
    ap.add_argument("--out", type=Path, default=Path("runs/efficacy"))
    args = vars(ap.parse_args())
    out = args.pop("out")
    cfg = EfficacyConfig(**args)
    out.mkdir(parents=True, exist_ok=True)

    result = efficacy_run(cfg, progress=print)
    print(result.lines()[0])
    summary = {"config": dataclasses.asdict(cfg), "noisy_psnr": result.noisy_psnr,
               "gain_db": result.gain, "loss_ok": result.loss_ok, "runs": {}}
    for m, run in result.runs.items():
        save_checkpoint(out / f"m{m}.ssbsn", run.model, {"step": cfg.steps})
        (out / f"m{m}_losses.txt").write_text("".join(f"{v:.8f}\n" for v in run.losses))
        summary["runs"][m] = {"psnr": run.denoised_psnr, "ssim": run.denoised_ssim,
                              "final_loss": run.final_loss(cfg.final_window),
                              "seconds": run.seconds}
    for probe in attention_probe(result.main.model, cfg.period):
        print(f"layer {probe.layer} (dhat {probe.dhat}): {probe.repeats} motif repeats in top-4")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print("gain %.2f dB, m=%d loss <= m=%d loss: %s"
          % (result.gain, cfg.m, cfg.baseline_m, result.loss_ok))


if __name__ == "__main__":
    main()
