"""Shark-fin distortion of the pump resonance and the fast-scan escape.

    python3 demos/photorefractive_scan.py
"""
from sqzforge.cavity import (CavityParams, PhotorefractiveParams, asymmetry, dip_center,
                             max_deviation_from_lorentzian, scan_window, shift_regression,
                             simulate_scan)

cav = CavityParams.from_q(775.0, 7.1e4, 0.55)
pr = PhotorefractiveParams(beta=17.4, tau=30.0)
print(f"loaded linewidth {cav.linewidth_nm * 1e3:.2f} pm, regime {cav.regime}")

for p in (1.0, 2.0, 5.0):
    tr = simulate_scan(cav, pr, 0.5, p, scan_window(cav, pr, p))
    print(f"{p:.0f} mW at 0.5 nm/s: dip at {dip_center(tr):.2f} nm, asymmetry {asymmetry(tr):.3f}")
reg = shift_regression(cav, pr, 0.5, [1.0, 2.0, 3.0, 5.0])
print(f"shift slope {reg.slope:.2f} nm/mW (R^2 {reg.r2:.5f})")

# faster than beta * P / tau the laser outruns the drag
for v in (0.1, 1.0, 10.0, 100.0):
    tr = simulate_scan(cav, pr, v, 0.9, scan_window(cav, pr, 0.9))
    print(f"{v:5g} nm/s: max |T - Lorentzian| {max_deviation_from_lorentzian(tr, cav):.4f}")
