import os
from typing import List

from elimpute.config import configure_logging, get_settings
from elimpute.simulation import SCENARIO_NAMES, format_report, make_scenario, run_study
from elimpute.storage import write_study_report


DEFAULT_OUTPUT_DIR = os.getenv("STUDY_OUT", os.path.join(os.path.dirname(__file__), "results"))
DEFAULT_SIZES = {"logistic": (150, 250)}
CORRELATION_SIZES = (100, 200)


def get_study_grid() -> List[tuple]:
    """Scenario and sample size pairs to run; STUDY_SCENARIOS and STUDY_SIZES narrow the grid."""
    scenarios = [s for s in os.getenv("STUDY_SCENARIOS", ",".join(SCENARIO_NAMES)).split(",") if s]
    override = [int(n) for n in os.getenv("STUDY_SIZES", "").split(",") if n]
    return [
        (name, n)
        for name in scenarios
        for n in (override or DEFAULT_SIZES.get(name, CORRELATION_SIZES))
    ]


def reproduce_tables() -> str:
    """Run every scenario in the grid and write one CSV and text table per run."""
    configure_logging()
    R = int(os.getenv("STUDY_R", "1000"))
    B = int(os.getenv("STUDY_B", "400"))
    seed = int(os.getenv("STUDY_SEED", "20240101"))
    truth_draws = int(os.getenv("STUDY_TRUTH_DRAWS", "10000000"))
    jobs = get_settings().default_jobs

    os.makedirs(DEFAULT_OUTPUT_DIR, exist_ok=True)
    for name, n in get_study_grid():
        print(f"Running {name} with n={n}, R={R}, B={B}")
        report = run_study(make_scenario(name, n), R=R, B=B, seed=seed, truth_draws=truth_draws, jobs=jobs)
        stem = os.path.join(DEFAULT_OUTPUT_DIR, f"{name}-n{n}")
        write_study_report(report, f"{stem}.csv", f"{stem}.txt")
        print(format_report(report))

    print(f"\nResults saved to: {DEFAULT_OUTPUT_DIR}")
    return DEFAULT_OUTPUT_DIR


if __name__ == "__main__":
    reproduce_tables()
