#!/usr/bin/env python3
"""Consistent apparatus setpoints for a greybox system file.

Solves a steady-state power flow of the network in the system file with
an external grid, given as a voltage source behind the shunt at
--grid-node, and rewrites every apparatus setpoint (p, q, v, angle_deg) so
that the terminal operating points satisfy KCL. swing_sg nodes are PV
buses; E_prime is updated so that the machine delivers the solved Q.
gfm_droop nodes are PV buses, gfl_inverter nodes PQ buses.

usage: power_flow.py SYSTEM.json --grid-node 1 [--grid-v 1.0] [-o OUT.json]
"""
import argparse
import json
import math

import numpy as np
from scipy.optimize import fsolve


def node_admittance(sys):
    w0 = 2 * math.pi * sys["base"]["f0_hz"]
    k = len(sys["nodes"])
    y = np.zeros((k, k), dtype=complex)
    for b in sys.get("branches", []):
        i, j = b["from"] - 1, b["to"] - 1
        yb = 1.0 / (b.get("r", 0.0) + 1j * w0 * b.get("l", 0.0))
        yc = 0.5j * w0 * b.get("c", 0.0)
        y[i, i] += yb + yc
        y[j, j] += yb + yc
        y[i, j] -= yb
        y[j, i] -= yb
    shunt_y = np.zeros(k, dtype=complex)
    for n in sys["nodes"]:
        s = n.get("shunt")
        if not s:
            continue
        r, l, c = s.get("r", 0.0), s.get("l", 0.0), s.get("c", 0.0)
        ys = 0.0
        if r > 0 or l > 0:
            ys += 1.0 / (r + 1j * w0 * l)
        ys += 1j * w0 * c
        shunt_y[n["id"] - 1] = ys
        y[n["id"] - 1, n["id"] - 1] += ys
    return y, shunt_y


def solve(sys, grid_node, grid_v):
    y, shunt_y = node_admittance(sys)
    k = y.shape[0]
    g = grid_node - 1
    source = shunt_y[g] * grid_v  # Norton current of the external grid
    app = {a["node"] - 1: a for a in sys["apparatus"]}

    def unpack(z):
        v = z[:k] * np.exp(1j * z[k:2 * k])
        return v, z[2 * k:]

    pv = [n for n, a in app.items() if a["model"] in ("swing_sg", "gfm_droop")]

    def residual(z):
        v, qx = unpack(z)
        inj = np.zeros(k, dtype=complex)
        inj[g] += source
        out = []
        qmap = dict(zip(pv, qx))
        for n, a in app.items():
            sp = a.get("setpoint", {})
            q = qmap.get(n, sp.get("q", 0.0))
            inj[n] += np.conj((sp.get("p", 0.0) + 1j * q) / v[n])
        mis = y @ v - inj
        out.extend(mis.real)
        out.extend(mis.imag)
        for n in pv:
            out.append(z[n] - app[n].get("setpoint", {}).get("v", 1.0))
        return out

    z0 = np.concatenate([np.ones(k), np.zeros(k), np.zeros(len(pv))])
    # the 2k KCL equations plus PV constraints against 2k + |pv| unknowns
    sol, info, ok, msg = fsolve(residual, z0, full_output=True, xtol=1e-13)
    if max(abs(np.array(residual(sol)))) > 1e-10:
        raise SystemExit("power flow did not converge: " + str(msg))
    v, qx = unpack(sol)
    qmap = dict(zip(pv, qx))
    for n, a in app.items():
        sp = a.setdefault("setpoint", {})
        sp["v"] = round(float(abs(v[n])), 12)
        sp["angle_deg"] = round(float(math.degrees(np.angle(v[n]))), 12)
        q = float(qmap.get(n, sp.get("q", 0.0)))
        sp["q"] = round(q, 12)
        if a["model"] == "swing_sg":
            i_out = np.conj((sp.get("p", 0.0) + 1j * q) / v[n])
            e = v[n] + 1j * a["params"]["X_prime"] * i_out
            a["params"]["E_prime"] = round(float(abs(e)), 12)
    return sys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("system")
    ap.add_argument("--grid-node", type=int, required=True)
    ap.add_argument("--grid-v", type=float, default=1.0)
    ap.add_argument("-o", "--output")
    args = ap.parse_args()
    with open(args.system) as f:
        sys = json.load(f)
    sys = solve(sys, args.grid_node, args.grid_v)
    text = json.dumps(sys, indent=2) + "\n"
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        print(text, end="")


if __name__ == "__main__":
    main()
