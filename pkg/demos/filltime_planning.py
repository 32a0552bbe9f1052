"""Plan checkpoint times for a few machines with the fill-time law."""

from ckptf import filltime as ft

for spec in ft.TABLE1:
    pred = ft.ideal_ckpt_time(spec)
    print(f"{spec.name:24s} ideal {pred.ideal_ckpt_time:6.2f} min   "
          f"realistic {pred.real_world_estimate:7.1f} min")

ssd = next(s for s in ft.TABLE1 if s.name.startswith("SSD"))
print(f"\nDumping only 3 GB on the SSD node takes {ft.partial_dump_time(ssd, 3 * ft.GB) * 60:.1f} s")
