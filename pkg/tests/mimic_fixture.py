"""Synthetic CSV with the column layout of a real ED triage extract."""

import numpy as np
import pandas as pd

COMPLAINTS = ["chest_pain", "abdominal_pain", "headache", "shortness_of_breath", "back_pain", "cough",
              "nausea_vomiting", "fever_chills", "syncope", "dizziness", "laceration", "other"]


def write_mimic_like_csv(path, n=3000, seed=0):
    rng = np.random.default_rng(seed)
    vitals = {
        "temperature": rng.normal(98.4, 1.0, n),
        "heartrate": rng.normal(85, 15, n),
        "resprate": rng.normal(18, 3, n),
        "o2sat": np.clip(rng.normal(97.5, 2.0, n), 80, 100),
        "sbp": rng.normal(135, 20, n),
        "dbp": rng.normal(78, 12, n),
        "pain": rng.integers(0, 11, n).astype(float),
    }
    # the dirt a real extract carries: impossible readings and blanks
    vitals["o2sat"][rng.choice(n, 15, replace=False)] = 105.0
    vitals["pain"][rng.choice(n, 15, replace=False)] = 15.0
    vitals["temperature"][rng.choice(n, 5, replace=False)] = 985.0
    age = rng.uniform(18, 95, n)
    risk = 1 / (1 + np.exp(-(-2.5 + 0.03 * (age - 55) + 0.04 * (vitals["heartrate"] - 85))))
    u = rng.random(n)
    d1 = np.where(u < 0.55 * (1 - risk), 0, np.where(u < 0.9, 2, 3))
    d2 = np.where(d1 == 2, np.where(rng.random(n) < 0.1 + risk, 3, 0), -1)
    reached = d1 != 0
    outcome = np.where(reached, (rng.random(n) < risk).astype(int), -1)
    gender = rng.choice(["M", "F"], n)
    acuity = np.clip(np.round(4 - 3 * risk + rng.normal(0, 0.7, n)), 1, 5)

    def cell(arr, mask):
        return [("" if not m else str(int(v))) for v, m in zip(arr, mask)]

    df = pd.DataFrame({
        "visit_id": [f"ed{i:05d}" for i in range(n)],
        "decision_1": d1.astype(str),
        "decision_2": cell(d2, d2 >= 0),
        "outcome": cell(outcome, reached),
    })
    for k, v in vitals.items():
        col = [f"{x:.1f}" for x in v]
        for i in rng.choice(n, 20, replace=False):
            col[i] = ""
        df[k] = col
    df["chiefcomplaint"] = rng.choice(COMPLAINTS, n)
    df["age"] = [f"{a:.0f}" if r else "" for a, r in zip(age, reached)]
    df["gender"] = gender
    df["acuity"] = acuity.astype(int).astype(str)
    df.to_csv(path, index=False)
    return path
