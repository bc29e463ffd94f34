"""Regenerate the bundled grid files in src/gridvolt/powerflow/data/.

Single-phase positive-sequence equivalents of the IEEE 13-, 34- and 123-node
test feeders. Line impedances use z1 = mean(self) - mean(mutual) of each
phase-impedance configuration (self impedance for one-phase laterals).
Regulators and closed switches become short low-impedance branches; open
switches are dropped. The 34-node feeder has its line lengths scaled by 0.3
in place of its two voltage regulators. Spot and distributed loads are lumped per bus
(distributed loads split between both ends).

    python scripts/make_grids.py
"""
from pathlib import Path

from gridvolt.powerflow import BaseQuantities, BusRecord, LineRecord, build_grid, save_grid

OUT = Path(__file__).resolve().parents[1] / "src" / "gridvolt" / "powerflow" / "data"
FT_PER_MILE = 5280.0
SWITCH = (1e-4, 1e-4)


def _zbase(kv, s_kva):
    return (kv * 1e3) ** 2 / (s_kva * 1e3)


def feeder(name, kv, s_kva, v_slack, sub, configs, lines, loads, xfmrs=(), lv_kv=None, lv_buses=(),
           length_scale=1.0):
    """Build a feeder. ``sub`` = (kva, r%, x%) substation transformer from 'sourcebus'."""
    zb = _zbase(kv, s_kva)
    zb_lv = _zbase(lv_kv, s_kva) if lv_kv else zb
    branches = []
    kva, r, x = sub
    first = lines[0][0]
    branches.append(LineRecord("sourcebus", first, r / 100 * s_kva / kva, x / 100 * s_kva / kva))
    for a, b, length_ft, cfg in lines:
        if cfg == "switch":
            branches.append(LineRecord(a, b, *SWITCH))
            continue
        zr, zx = configs[cfg]
        base = zb_lv if (a in lv_buses and b in lv_buses) else zb
        miles = length_ft * length_scale / FT_PER_MILE
        branches.append(LineRecord(a, b, zr * miles / base, zx * miles / base))
    for a, b, t_kva, r, x in xfmrs:
        branches.append(LineRecord(a, b, r / 100 * s_kva / t_kva, x / 100 * s_kva / t_kva))
    names = []
    for ln in branches:
        for n in (ln.from_bus, ln.to_bus):
            if n not in names:
                names.append(n)
    buses = [BusRecord("sourcebus", "slack")]
    buses += [BusRecord(n, "pq", *loads.get(n, (0.0, 0.0))) for n in names if n != "sourcebus"]
    unknown = set(loads) - set(names)
    if unknown:
        raise ValueError(f"{name}: loads on unknown buses {sorted(unknown)}")
    return build_grid(buses, branches, BaseQuantities(kv, s_kva, v_slack), name=name)


def add_distributed(loads, a, b, p, q):
    for n in (a, b):
        lp, lq = loads.get(n, (0.0, 0.0))
        loads[n] = (lp + p / 2, lq + q / 2)


def two_bus():
    return build_grid([BusRecord("b1", "slack"), BusRecord("b2", "pq", 20.0, 5.0)],
                      [LineRecord("b1", "b2", 0.01, 0.02)],
                      BaseQuantities(0.4, 100.0, 1.0), name="2bus")


def ieee13():
    cfg = {601: (0.1858, 0.5968), 602: (0.5921, 0.7673), 603: (1.1200, 0.8927),
           604: (1.1200, 0.8927), 605: (1.3292, 1.3475), 606: (0.4826, 0.4168),
           607: (1.3425, 0.5124)}
    lines = [("650", "632", 2000, 601), ("632", "633", 500, 602), ("632", "645", 500, 603),
             ("645", "646", 300, 603), ("632", "671", 2000, 601), ("671", "684", 300, 604),
             ("684", "611", 300, 605), ("684", "652", 800, 607), ("671", "692", 0, "switch"),
             ("692", "675", 500, 606), ("671", "680", 1000, 601)]
    loads = {"634": (400, 290), "645": (170, 125), "646": (230, 132), "652": (128, 86),
             "671": (1155, 660), "675": (843, 462), "692": (170, 151), "611": (170, 80)}
    add_distributed(loads, "632", "671", 200, 116)
    return feeder("ieee13", 4.16, 1000, 1.05, (5000, 1.0, 8.0), cfg, lines, loads,
                  xfmrs=[("633", "634", 500, 1.1, 2.0)])


def ieee34():
    cfg = {300: (1.1201, 0.8333), 301: (1.6933, 0.8411), 302: (2.7995, 1.4855),
           303: (2.7995, 1.4855), 304: (1.9217, 1.4212)}
    lines = [("800", "802", 2580, 300), ("802", "806", 1730, 300), ("806", "808", 32230, 300),
             ("808", "810", 5804, 303), ("808", "812", 37500, 300), ("812", "814", 29730, 300),
             ("814", "850", 10, 301), ("850", "816", 310, 301), ("816", "818", 1710, 302),
             ("816", "824", 10210, 301), ("818", "820", 48150, 302), ("820", "822", 13740, 302),
             ("824", "826", 3030, 303), ("824", "828", 840, 301), ("828", "830", 20440, 301),
             ("830", "854", 520, 301), ("854", "856", 23330, 303), ("854", "852", 36830, 301),
             ("852", "832", 10, 301), ("832", "858", 4900, 301), ("858", "864", 1620, 302),
             ("858", "834", 5830, 301), ("834", "842", 280, 301), ("834", "860", 2020, 301),
             ("842", "844", 1350, 301), ("844", "846", 3640, 301), ("846", "848", 530, 301),
             ("860", "836", 2680, 301), ("836", "840", 860, 301), ("836", "862", 280, 301),
             ("862", "838", 4860, 304), ("888", "890", 10560, 300)]
    loads = {"860": (60, 48), "840": (27, 21), "844": (405, 315), "848": (60, 48),
             "890": (450, 225), "830": (45, 20)}
    for a, b, p, q in [("802", "806", 55, 29), ("808", "810", 16, 8), ("818", "820", 34, 17),
                       ("820", "822", 135, 70), ("816", "824", 5, 2), ("824", "826", 40, 20),
                       ("824", "828", 4, 2), ("828", "830", 7, 3), ("854", "856", 4, 2),
                       ("832", "858", 15, 7), ("858", "864", 2, 1), ("858", "834", 32, 17),
                       ("834", "860", 146, 73), ("860", "836", 82, 43), ("836", "840", 40, 20),
                       ("862", "838", 28, 14), ("842", "844", 9, 5), ("844", "846", 45, 23),
                       ("846", "848", 23, 11)]:
        add_distributed(loads, a, b, p, q)
    # The two line regulators are not representable in the fixed-point model;
    # line lengths are shortened so the unregulated equivalent stays near the
    # regulated feeder's voltage range at nominal load.
    return feeder("ieee34", 24.9, 1000, 1.05, (2500, 1.0, 8.0), cfg, lines, loads,
                  xfmrs=[("832", "888", 500, 1.9, 4.08)], lv_kv=4.16, lv_buses=("888", "890"),
                  length_scale=0.3)


def ieee123():
    three = (0.3000, 0.5800)
    one = (1.3292, 1.3475)
    cfg = {k: three for k in range(1, 9)}
    cfg.update({9: one, 10: one, 11: one, 12: (0.9900, 0.5200)})
    lines = [
        ("150", "149", 10, "switch"), ("149", "1", 400, 1),
        ("1", "2", 175, 10), ("1", "3", 250, 11), ("1", "7", 300, 1), ("3", "4", 200, 11),
        ("3", "5", 325, 11), ("5", "6", 250, 11), ("7", "8", 200, 1), ("8", "12", 225, 10),
        ("8", "9", 225, 9), ("8", "13", 300, 1), ("9", "14", 425, 9), ("13", "34", 150, 11),
        ("13", "18", 825, 2), ("14", "11", 250, 9), ("14", "10", 250, 9), ("15", "16", 375, 11),
        ("15", "17", 350, 11), ("18", "19", 250, 9), ("18", "21", 300, 2), ("19", "20", 325, 9),
        ("21", "22", 525, 10), ("21", "23", 250, 2), ("23", "24", 550, 11), ("23", "25", 275, 2),
        ("25", "28", 200, 2), ("25", "26", 350, 7), ("26", "27", 275, 7), ("26", "31", 225, 11),
        ("27", "33", 500, 9), ("28", "29", 300, 2), ("29", "30", 350, 2), ("30", "250", 200, 2),
        ("31", "32", 300, 11), ("34", "15", 100, 11), ("35", "36", 650, 8), ("35", "40", 250, 1),
        ("36", "37", 300, 9), ("36", "38", 250, 10), ("38", "39", 325, 10), ("40", "41", 325, 11),
        ("40", "42", 250, 1), ("42", "43", 500, 10), ("42", "44", 200, 1), ("44", "45", 200, 9),
        ("44", "47", 250, 1), ("45", "46", 300, 9), ("47", "48", 150, 4), ("47", "49", 250, 4),
        ("49", "50", 250, 4), ("50", "51", 250, 4), ("52", "53", 200, 1), ("53", "54", 125, 1),
        ("54", "55", 275, 1), ("54", "57", 350, 3), ("55", "56", 275, 1), ("57", "58", 250, 10),
        ("57", "60", 750, 3), ("58", "59", 250, 10), ("60", "61", 550, 5), ("60", "62", 250, 12),
        ("62", "63", 175, 12), ("63", "64", 350, 12), ("64", "65", 425, 12), ("65", "66", 325, 12),
        ("67", "68", 200, 9), ("67", "72", 275, 3), ("67", "97", 250, 3), ("68", "69", 275, 9),
        ("69", "70", 325, 9), ("70", "71", 275, 9), ("72", "73", 275, 11), ("72", "76", 200, 3),
        ("73", "74", 350, 11), ("74", "75", 400, 11), ("76", "77", 400, 6), ("76", "86", 700, 3),
        ("77", "78", 100, 6), ("78", "79", 225, 6), ("78", "80", 475, 6), ("80", "81", 475, 6),
        ("81", "82", 250, 6), ("81", "84", 675, 11), ("82", "83", 250, 6), ("84", "85", 475, 11),
        ("86", "87", 450, 6), ("87", "88", 175, 9), ("87", "89", 275, 6), ("89", "90", 225, 10),
        ("89", "91", 225, 6), ("91", "92", 300, 11), ("91", "93", 225, 6), ("93", "94", 275, 9),
        ("93", "95", 300, 6), ("95", "96", 200, 10), ("97", "98", 275, 3), ("98", "99", 550, 3),
        ("99", "100", 300, 3), ("100", "450", 800, 3), ("101", "102", 225, 11),
        ("101", "105", 275, 3), ("102", "103", 325, 11), ("103", "104", 700, 11),
        ("105", "106", 225, 10), ("105", "108", 325, 3), ("106", "107", 575, 10),
        ("108", "109", 450, 9), ("108", "300", 1000, 3), ("109", "110", 300, 9),
        ("110", "111", 575, 9), ("110", "112", 125, 9), ("112", "113", 525, 9),
        ("113", "114", 325, 9), ("135", "35", 375, 4), ("152", "52", 400, 1),
        ("160", "67", 350, 6), ("197", "101", 250, 3),
        ("13", "152", 0, "switch"), ("18", "135", 0, "switch"), ("60", "160", 0, "switch"),
        ("97", "197", 0, "switch"),
    ]
    spot = {
        1: 40, 2: 20, 4: 40, 5: 20, 6: 40, 7: 20, 9: 40, 10: 20, 11: 40, 12: 20, 16: 40, 17: 20,
        19: 40, 20: 40, 22: 40, 24: 40, 28: 40, 29: 40, 30: 40, 31: 20, 32: 20, 33: 40, 34: 40,
        35: 40, 37: 40, 38: 20, 39: 20, 41: 20, 42: 20, 43: 40, 45: 20, 46: 20, 47: 105,
        48: 210, 49: 140, 50: 40, 51: 20, 52: 40, 53: 40, 55: 20, 56: 20, 58: 20, 59: 20, 60: 20,
        62: 40, 63: 40, 64: 75, 65: 140, 66: 75, 68: 20, 69: 40, 70: 20, 71: 40, 73: 40, 74: 40,
        75: 40, 76: 245, 77: 40, 79: 40, 80: 40, 82: 40, 83: 20, 84: 20, 85: 40, 86: 20, 87: 40,
        88: 40, 90: 40, 92: 40, 94: 40, 95: 20, 96: 20, 98: 40, 99: 40, 100: 40, 102: 20,
        103: 40, 104: 40, 106: 40, 107: 40, 109: 40, 111: 20, 112: 20, 113: 40, 114: 20,
    }
    qmap = {47: 75, 48: 150, 49: 95, 64: 35, 65: 100, 66: 35, 76: 180}
    loads = {str(b): (float(p), float(qmap.get(b, p / 2))) for b, p in spot.items()}
    return feeder("ieee123", 4.16, 1000, 1.05, (5000, 1.0, 8.0), cfg, lines, loads,
                  xfmrs=[("61", "610", 150, 1.27, 2.72)])


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for g in (two_bus(), ieee13(), ieee34(), ieee123()):
        save_grid(g, OUT / f"{g.name}.grid")
        print(f"{g.name}: {g.n_bus} buses, nominal load {g.p_nominal_kw.sum():.0f} kW, "
              f"residual {g.reduction_residual():.2e}")


if __name__ == "__main__":
    main()
