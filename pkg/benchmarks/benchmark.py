"""Benchmarking suite for the search engine's runtime-bounded checks."""

import json
import statistics
import sys
import time
from pathlib import Path
from typing import Dict

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.cost import sdo_grid_violations
from src.history import Candidate
from src.search import SearchConfig, default_lut, pareto_frontier, run_search
from src.spaces import PRESETS, cardinality, resolve_space


class BenchmarkRunner:
    """Time cardinality, SDO grid, frontier and search throughput."""

    def __init__(self, space: str = "mnasfpn"):
        self.space = resolve_space(space)
        self.results: Dict = {}

    def benchmark_cardinality(self, rounds: int = 100) -> Dict:
        """Exact cardinality of every preset."""
        print(f"\nBenchmarking cardinality ({rounds} rounds)...")
        times = []
        for _ in range(rounds):
            start = time.time()
            for space in PRESETS.values():
                cardinality(space)
            times.append((time.time() - start) * 1000)
        return {"test": "cardinality", "rounds": rounds, "avg_ms": statistics.mean(times)}

    def benchmark_sdo_grid(self) -> Dict:
        """Exhaustive SDO dominance grid."""
        print("\nBenchmarking SDO grid...")
        start = time.time()
        checked, violations = sdo_grid_violations()
        return {
            "test": "sdo_grid",
            "cases": checked,
            "violations": len(violations),
            "elapsed_ms": (time.time() - start) * 1000,
        }

    def benchmark_frontier(self, sets: int = 10, size: int = 10_000) -> Dict:
        """Pareto frontier of random candidate sets."""
        print(f"\nBenchmarking frontier ({sets} sets of {size})...")
        rng = np.random.default_rng(0)
        times = []
        for _ in range(sets):
            latency = rng.uniform(100.0, 300.0, size=size)
            quality = rng.uniform(0.0, 1.0, size=size)
            candidates = [
                Candidate(
                    candidate_id=str(i),
                    step=i,
                    genome=(0,),
                    quality=q,
                    latency_ms=l,
                    reward=q * l**-0.3,
                )
                for i, (l, q) in enumerate(zip(latency, quality))
            ]
            start = time.time()
            pareto_frontier(candidates)
            times.append((time.time() - start) * 1000)
        return {"test": "frontier", "sets": sets, "size": size, "avg_ms": statistics.mean(times)}

    def benchmark_search(self, budget: int = 500, controller: str = "random") -> Dict:
        """Surrogate search throughput at one cell repeat."""
        print(f"\nBenchmarking search ({budget} candidates, {controller})...")
        lut = default_lut(self.space, 320)
        config = SearchConfig(
            space=self.space.name, budget=budget, batch_size=20, controller=controller, repeats=1
        )
        start = time.time()
        run_search(config, lut=lut)
        elapsed = time.time() - start
        return {
            "test": "search",
            "budget": budget,
            "controller": controller,
            "elapsed_s": elapsed,
            "candidates_per_sec": budget / elapsed,
        }

    def run_all_benchmarks(self) -> Dict:
        results = {
            "timestamp": time.strftime("%Y-%m-%d %H:%M:%S"),
            "space": self.space.name,
            "benchmarks": {},
        }
        results["benchmarks"]["cardinality"] = self.benchmark_cardinality()
        results["benchmarks"]["sdo_grid"] = self.benchmark_sdo_grid()
        results["benchmarks"]["frontier"] = self.benchmark_frontier()
        results["benchmarks"]["search_random"] = self.benchmark_search(controller="random")
        results["benchmarks"]["search_policy"] = self.benchmark_search(controller="policy-gradient")
        return results

    def print_summary(self, results: Dict):
        print("\n" + "=" * 60)
        print("BENCHMARK RESULTS SUMMARY")
        print("=" * 60)
        b = results["benchmarks"]
        print(f"\nCardinality (all presets): {b['cardinality']['avg_ms']:.3f}ms")
        grid = b["sdo_grid"]
        print(f"SDO grid: {grid['cases']} cases, {grid['violations']} violations, {grid['elapsed_ms']:.1f}ms")
        print(f"Frontier ({b['frontier']['size']} candidates): {b['frontier']['avg_ms']:.1f}ms")
        for key in ("search_random", "search_policy"):
            s = b[key]
            print(f"Search ({s['controller']}): {s['candidates_per_sec']:.0f} candidates/s")
        print("\n" + "=" * 60)

    def save_results(self, results: Dict, filename: str = "benchmark_results.json"):
        with open(filename, "w") as f:
            json.dump(results, f, indent=2)
        print(f"\nResults saved to {filename}")


def main():
    runner = BenchmarkRunner()
    results = runner.run_all_benchmarks()
    runner.print_summary(results)
    runner.save_results(results, "benchmarks/benchmark_results.json")


if __name__ == "__main__":
    main()
