# Regenerate with: python3 oracle_summary.py (run from this directory).
# Independent oracle for summary.csv: time-weighted 95% bound, OLS, scipy t.
import csv, json, os, glob
import numpy as np
from scipy import stats
rows = {}
for mpath in sorted(glob.glob("sample_results/*/run.json")):
    m = json.load(open(mpath)); d = os.path.dirname(mpath)
    mem = list(csv.DictReader(open(os.path.join(d, "memory.csv"))))
    for ph in m["phases"]:
        s = [(int(r["t_ns"]), int(r["rss_bytes"])) for r in mem if r["phase"] == ph["phase"]]
        dur = [(s[i][1], (s[i+1][0] if i + 1 < len(s) else ph["end_ns"]) - s[i][0]) for i in range(len(s))]
        tot = sum(x[1] for x in dur); acc = 0
        for v, dd in sorted(dur):
            acc += dd
            if acc * 100 >= 95 * tot: b = v; break
        rows.setdefault((m["variant"], ph["phase"], m["ballast_bytes"]), []).append((m["operators"], b))
out = ["variant,phase,operators,ballast_bytes,bound_bytes,fit_low,fit_high"]
recs = []
for (var, ph, bal), pts in rows.items():
    x = np.array([p[0] for p in pts], float); y = np.array([p[1] for p in pts], float)
    n = len(x); slope, icpt = np.polyfit(x, y, 1)
    s = np.sqrt(((y - icpt - slope * x) ** 2).sum() / (n - 2)); sxx = ((x - x.mean()) ** 2).sum()
    t = stats.t.ppf(0.975, n - 2)
    for ops in sorted(set(x.astype(int))):
        mean = np.mean([p[1] for p in pts if p[0] == ops])
        half = t * s * np.sqrt(1 + 1 / n + (ops - x.mean()) ** 2 / sxx); c = icpt + slope * ops
        recs.append((var, 0 if ph == "active" else 1, ops, bal, f"{var},{ph},{ops},{bal},{int(np.floor(mean + 0.5))},{c - half:.0f},{c + half:.0f}"))
for r in sorted(recs): out.append(r[4])
open("expected_summary.csv", "w").write("\n".join(out) + "\n")
print("\n".join(out))
