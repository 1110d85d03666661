"""Regenerates the CSV fixtures in this directory. Requires numpy."""
import json
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent

# British coal-mining disasters per year, 1851-1961; None marks the two
# years without a record.
COAL_COUNTS = [
    4, 5, 4, 0, 1, 4, 3, 4, 0, 6, 3, 3, 4, 0, 2, 6, 3, 3, 5, 4, 5, 3, 1, 4, 4, 1,
    5, 5, 3, 4, 2, 5, 2, 2, 3, 4, 2, 1, 3, None, 2, 1, 1, 1, 1, 3, 0, 0, 1, 0, 1, 1,
    0, 0, 3, 1, 0, 3, 2, 2, 0, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0, 2, 1, 0, 0, 0, 1, 1,
    0, 2, 3, 3, 1, None, 2, 1, 1, 1, 1, 2, 4, 2, 0, 0, 1, 4, 0, 0, 0, 1, 0, 0, 0, 0,
    0, 1, 0, 0, 1, 0, 1,
]


def coal():
    events = []
    for year, c in zip(range(1851, 1962), COAL_COUNTS):
        if not c:
            continue
        events.extend(year + (k + 0.5) / c for k in range(c))
    events = np.array(events)
    with open(HERE / "coal_events.csv", "w") as f:
        f.write("date\n")
        for t in events:
            f.write(f"{float(t)!r}\n")
    # the preprocessing under test, verbatim
    years = int(events.max() - events.min())
    bins = years // 4
    hist, x_edges = np.histogram(events, bins=bins)
    x_centers = x_edges[:-1] + (x_edges[1] - x_edges[0]) / 2
    with open(HERE / "coal_binned_numpy.csv", "w") as f:
        f.write("year,count\n")
        for x, y in zip(x_centers, hist):
            f.write(f"{float(x)!r},{int(y)}\n")


def bikes(rng):
    n = 348
    hour = rng.integers(0, 24, n)
    temperature = rng.uniform(0.05, 0.95, n)
    humidity = rng.uniform(0.2, 1.0, n)
    windspeed = rng.uniform(0.0, 0.5, n)
    commute = np.exp(-0.5 * ((hour - 8) / 1.5) ** 2) + 1.2 * np.exp(-0.5 * ((hour - 17.5) / 2.0) ** 2)
    daytime = 1.0 / (1.0 + np.exp(-(hour - 6.5))) * 1.0 / (1.0 + np.exp(hour - 21.5))
    log_mu = 2.0 + 2.2 * daytime + 1.6 * commute + 1.5 * temperature - 0.3 * humidity - 0.2 * windspeed
    mu = np.exp(log_mu)
    alpha = 5.0
    count = rng.poisson(rng.gamma(alpha, mu / alpha))
    with open(HERE / "bikes.csv", "w") as f:
        f.write("hour,temperature,humidity,windspeed,count\n")
        for row in zip(hour, temperature, humidity, windspeed, count):
            f.write(f"{row[0]},{row[1]:.4f},{row[2]:.4f},{row[3]:.4f},{row[4]}\n")


def marketing(rng):
    n = 200
    youtube = np.sort(rng.uniform(0.0, 350.0, n))
    mean = 3.0 + 1.1 * np.sqrt(youtube)
    sd = 0.5 + 0.012 * youtube
    sales = mean + sd * rng.standard_normal(n)
    with open(HERE / "marketing.csv", "w") as f:
        f.write("youtube,sales\n")
        for x, y in zip(youtube, sales):
            f.write(f"{x:.3f},{y:.4f}\n")


def configs():
    cfg = {
        "coal.json": {
            "data": {"events": "coal_events.csv", "events_column": "date"},
            "family": "poisson",
            "link": "exp",
            "init_transform": "log",
            "m": 20,
            "chains": 4,
            "seed": 1,
        },
        "bikes.json": {
            "data": {"path": "bikes.csv", "target": "count"},
            "family": "negative_binomial",
            "link": "exp",
            "init_transform": "log1p",
            "m": 50,
            "seed": 7,
        },
        "marketing.json": {
            "data": {"path": "marketing.csv", "target": "sales"},
            "family": "normal",
            "out_dim": 2,
            "m": 200,
            "seed": 3,
        },
        "friedman.json": {
            "data": {"generator": {"kind": "friedman", "n": 200, "p": 10, "noise": 1.0, "seed": 11}},
            "m": 50,
            "seed": 5,
        },
        "sine.json": {
            "data": {"generator": {"kind": "simple", "shape": "sine", "seed": 2}},
            "m": 200,
            "seed": 9,
        },
    }
    for name, c in cfg.items():
        (HERE / name).write_text(json.dumps(c, indent=2) + "\n")


if __name__ == "__main__":
    coal()
    rng = np.random.default_rng(20240601)
    bikes(rng)
    marketing(rng)
    configs()
