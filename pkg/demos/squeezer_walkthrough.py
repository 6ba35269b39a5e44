"""From measured gain and noise levels to projected on-chip squeezing.

    python3 demos/squeezer_walkthrough.py
"""
from sqzforge import opo

# threshold from the amplified seed at 10 mW of pump
est = opo.threshold_from_gain(3.15, 10.0, g_minus=0.5)
print(f"threshold {est.p_th:.1f} mW; the G- branch gives {est.p_th_minus:.1f} mW")

# detection chain
budget = opo.EfficiencyBudget(qe=0.85, vis2=0.98, opt=0.45, esc=0.55)
print(f"total efficiency {budget.total:.3f}, external {budget.external:.3f}")

# spectrum at the operating point
params = opo.SqueezerParams.from_ratio(eta=0.23, ratio=0.02, fs=310.0)
for f in (5.0, 100.0, 325.0):
    n = opo.noise_power(params, f)
    print(f"{f:6.0f} MHz  S- {n.minus_db:+.3f} dB  S+ {n.plus_db:+.3f} dB")

# invert the measured pair, then project
pair = opo.infer_eta_x(opo.from_db(-0.46), opo.from_db(0.75), 5.0, 310.0)
print(f"measured pair -> eta {pair.eta:.3f}, pump amplitude ratio {pair.x:.3f}")
for eta in (pair.eta, 0.55):
    print(f"at threshold with eta {eta:.3f}: {opo.to_db(opo.project_threshold_limit(eta)):+.2f} dB")
onchip = opo.infer_onchip(opo.from_db(-0.46), budget.external)
print(f"on-chip squeezing behind the external losses: {opo.to_db(onchip):+.2f} dB")
