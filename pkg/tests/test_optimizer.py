from __future__ import annotations

import threading
from collections import Counter

import numpy as np
import pytest

from core.optimizer import (
    Chromosome,
    FitnessEvaluationError,
    GaConfig,
    GeneticBandOptimizer,
    round_half_up,
)


class ScriptedRng:
    """Stand-in generator replaying fixed uniforms."""

    def __init__(self, *draws: float | list[float]) -> None:
        self.draws = list(draws)

    def random(self, size: int | None = None) -> float | np.ndarray:
        value = self.draws.pop(0)
        return np.asarray(value, dtype=np.float64) if size is not None else float(value)


def _chromosome(genes: list[float], fitness: float | None = None) -> Chromosome:
    genes_array = np.asarray(genes, dtype=np.float64)
    return Chromosome(genes=genes_array, decoded=tuple(round_half_up(g) for g in genes), fitness=fitness)


def test_round_half_up() -> None:
    assert [round_half_up(v) for v in (0.5, 1.5, 2.49, 238.5)] == [1, 2, 2, 239]


def test_repair_moves_collisions_to_nearest_free_index() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=3), n_bands=240)

    repaired = optimizer.repair(np.array([5.4, 5.2, 4.6]))

    assert repaired.decoded == (5, 4, 6)
    np.testing.assert_array_equal(repaired.genes, [5.4, 4.0, 6.0])


def test_repair_avoids_fixed_bands() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=2), n_bands=10, fixed_bands=(3, 4))

    repaired = optimizer.repair(np.array([3.0, 4.2]))

    assert set(repaired.decoded).isdisjoint({3, 4})
    assert repaired.decoded == (2, 5)


def test_laplace_overshoot_is_clamped_then_repaired() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=3, crossover_prob=0.8), n_bands=240)
    p1 = _chromosome([230.0, 220.0, 225.0])
    p2 = _chromosome([200.0, 190.0, 180.0])
    # crossover fires; u = 1e-6 everywhere and r <= 0.5 gives beta = 0.5 * ln(1e6)
    rng = ScriptedRng(0.1, [1.0 - 1e-6] * 3, [0.2] * 3)

    child_a, child_b = optimizer.laplace_crossover(p1, p2, rng)

    assert child_a.decoded == (239, 238, 237)
    assert child_b.decoded == (239, 238, 237)
    assert all(0 <= g <= 239 for g in child_a.genes)


def test_crossover_skipped_copies_parents() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=3, crossover_prob=0.8), n_bands=240)
    p1, p2 = _chromosome([10.0, 20.0, 30.0]), _chromosome([40.0, 50.0, 60.0])

    child_a, child_b = optimizer.laplace_crossover(p1, p2, ScriptedRng(0.95))

    assert child_a.decoded == p1.decoded
    assert child_b.decoded == p2.decoded


def test_identical_parents_crossover_is_identity() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=3, crossover_prob=1.0), n_bands=240)
    parent = _chromosome([12.25, 100.0, 200.75])
    rng = np.random.default_rng(0)

    for _ in range(200):
        child_a, child_b = optimizer.laplace_crossover(parent, parent, rng)
        np.testing.assert_array_equal(child_a.genes, parent.genes)
        np.testing.assert_array_equal(child_b.genes, parent.genes)


def test_tournament_win_rate() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=1), n_bands=10)
    weak, strong = _chromosome([1.0], fitness=0.2), _chromosome([2.0], fitness=0.9)
    rng = np.random.default_rng(12)
    trials = 100_000

    wins = sum(optimizer.tournament_select([weak, strong], rng) is strong for _ in range(trials))

    assert wins / trials == pytest.approx(0.75, abs=0.01)


def test_tournament_needs_fitness() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=1), n_bands=10)
    with pytest.raises(ValueError):
        optimizer.tournament_select([_chromosome([1.0])], np.random.default_rng(0))


def test_power_mutation_at_lower_bound_moves_up() -> None:
    config = GaConfig(k=1, mutation_prob=1.0, power_p=4.0)
    optimizer = GeneticBandOptimizer(config, n_bands=240)
    rng = np.random.default_rng(1)
    at_lower = _chromosome([0.0])

    moved = np.array([optimizer.power_mutation(at_lower, rng).genes[0] for _ in range(5000)])

    assert np.all(moved >= 0.0)
    # E[s] = 1 / (p + 1) for s = u^p
    assert moved.mean() == pytest.approx(239.0 / 5.0, abs=3.0)


def test_power_mutation_at_upper_bound_moves_down() -> None:
    optimizer = GeneticBandOptimizer(GaConfig(k=1, mutation_prob=1.0), n_bands=240)
    rng = np.random.default_rng(2)
    moved = [optimizer.power_mutation(_chromosome([239.0]), rng).genes[0] for _ in range(500)]
    assert max(moved) <= 239.0


def test_infeasible_search_space() -> None:
    with pytest.raises(ValueError, match="infeasible"):
        GeneticBandOptimizer(GaConfig(k=3), n_bands=4, fixed_bands=(0, 1))


@pytest.mark.parametrize(
    "overrides",
    [{"population": 1}, {"crossover_prob": 1.5}, {"elite_count": 100}, {"k": 0}, {"runs": 0}, {"laplace_b": 0.0}],
)
def test_config_validation(overrides: dict[str, float]) -> None:
    with pytest.raises(ValueError):
        GaConfig(**overrides)


NEEDLE = (1, 4, 6)


def _needle(band_set: tuple[int, ...]) -> float:
    return 1.0 if band_set == NEEDLE else 0.0


def test_needle_found_in_most_seeds() -> None:
    found = 0
    for seed in range(5):
        config = GaConfig(population=20, max_generations=100, k=3, runs=1, seed=seed)
        best, _ = GeneticBandOptimizer(config, n_bands=8).evolve(_needle)
        found += best.band_set == NEEDLE
    assert found >= 4


def test_constant_fitness_stalls_after_window() -> None:
    config = GaConfig(population=10, max_generations=100, stall_window=50, k=2)
    _, history = GeneticBandOptimizer(config, n_bands=20).evolve(lambda bands: 0.5)

    assert len(history) == 51
    assert history[-1].generation == 50


def _bumpy(band_set: tuple[int, ...]) -> float:
    return float(np.cos(sum(b * (i + 3) for i, b in enumerate(band_set))) + 0.01 * sum(band_set))


def test_best_trace_is_non_decreasing() -> None:
    config = GaConfig(population=16, max_generations=30, k=3, runs=3, seed=4)
    result = GeneticBandOptimizer(config, n_bands=60).multi_run(_bumpy)

    for run in range(3):
        trace = [stats.best_f1 for stats in result.history if stats.run == run]
        assert trace == sorted(trace)
    assert result.best.fitness == max(stats.best_f1 for stats in result.history)


def test_evolve_is_deterministic() -> None:
    config = GaConfig(population=12, max_generations=15, k=3, seed=9)
    first = GeneticBandOptimizer(config, n_bands=40).evolve(_bumpy)
    second = GeneticBandOptimizer(config, n_bands=40, max_parallel_tasks=1).evolve(_bumpy)

    assert first[0].band_set == second[0].band_set
    assert [s.to_row() for s in first[1]] == [s.to_row() for s in second[1]]


def test_single_run_equals_evolve() -> None:
    config = GaConfig(population=12, max_generations=15, k=3, runs=1, seed=21)
    optimizer = GeneticBandOptimizer(config, n_bands=40)

    best, history = optimizer.evolve(_bumpy)
    result = optimizer.multi_run(_bumpy)

    assert result.best.band_set == best.band_set
    assert result.best_run == 0
    assert [s.best_f1 for s in result.history] == [s.best_f1 for s in history]


def test_each_band_set_evaluated_once() -> None:
    calls: Counter[tuple[int, ...]] = Counter()
    lock = threading.Lock()

    def counting(band_set: tuple[int, ...]) -> float:
        with lock:
            calls[band_set] += 1
        return _bumpy(band_set)

    config = GaConfig(population=20, max_generations=20, k=2, runs=2, seed=1)
    GeneticBandOptimizer(config, n_bands=12).multi_run(counting)

    assert calls
    assert max(calls.values()) == 1
    assert all(band_set == tuple(sorted(band_set)) for band_set in calls)


def test_fixed_bands_never_selected() -> None:
    config = GaConfig(population=10, max_generations=10, k=3, seed=2)
    optimizer = GeneticBandOptimizer(config, n_bands=12, fixed_bands=(0, 5, 11))
    seen: set[int] = set()

    def record(band_set: tuple[int, ...]) -> float:
        seen.update(band_set)
        return _bumpy(band_set)

    optimizer.evolve(record)
    assert seen.isdisjoint({0, 5, 11})


def test_failing_fitness_is_wrapped() -> None:
    def broken(band_set: tuple[int, ...]) -> float:
        raise ArithmeticError("bad band")

    optimizer = GeneticBandOptimizer(GaConfig(population=4, max_generations=2, k=2), n_bands=10)
    with pytest.raises(FitnessEvaluationError, match="generation 0") as info:
        optimizer.evolve(broken)
    assert isinstance(info.value.__cause__, ArithmeticError)
