"""
The two-phase weighting schedule
================================

The teacher weight is held for the warm-up epochs, then drops by 1/E_t per
epoch. Once it is no longer above the threshold the run switches to
self-distillation, whose soft-label weight ramps up with the epoch index.
"""

from askdlab.schedule import ScheduleConfig, trajectory

cfg = ScheduleConfig()
print(cfg)

for plan in trajectory(cfg):
    bar = "#" * int(round(20 * (plan.alpha_akd if plan.phase.value == "AKD" else plan.alpha_skd)))
    print(f"e={plan.epoch}  {plan.phase.value}  akd={plan.alpha_akd:.2f}  skd={plan.alpha_skd:.2f}  {bar}")

# a shorter warm-up moves the switch earlier
early = ScheduleConfig(warmup_epochs=0)
print("switch epoch with no warm-up:", [p.phase.value for p in trajectory(early)].index("SKD"))
