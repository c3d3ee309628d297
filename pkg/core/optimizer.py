"""Real-coded genetic algorithm searching k-band combinations."""

from __future__ import annotations

import asyncio
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from utils.logger import log

FitnessFn = Callable[[tuple[int, ...]], float]


class FitnessEvaluationError(RuntimeError):
    """A fitness call failed; carries the generation and band set."""


@dataclass(frozen=True)
class GaConfig:
    """GA settings; defaults are the production search setup."""

    population: int = 100
    max_generations: int = 100
    crossover_prob: float = 0.8
    mutation_prob: float = 0.2
    elite_count: int = 2
    runs: int = 5
    stall_window: int = 50
    stall_tol: float = 1e-6
    laplace_a: float = 0.0
    laplace_b: float = 0.5
    power_p: float = 4.0
    k: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")
        for name in ("crossover_prob", "mutation_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be within [0, 1], got {value}")
        if not 0 <= self.elite_count < self.population:
            raise ValueError(f"elite_count must be within [0, population), got {self.elite_count}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.max_generations < 1:
            raise ValueError(f"max_generations must be >= 1, got {self.max_generations}")
        if self.stall_window < 1:
            raise ValueError(f"stall_window must be >= 1, got {self.stall_window}")
        if self.laplace_b <= 0:
            raise ValueError(f"laplace_b must be > 0, got {self.laplace_b}")
        if self.power_p <= 0:
            raise ValueError(f"power_p must be > 0, got {self.power_p}")


@dataclass
class Chromosome:
    genes: np.ndarray
    decoded: tuple[int, ...]
    fitness: float | None = None

    @property
    def band_set(self) -> tuple[int, ...]:
        """Sorted decoded bands; the fitness cache key."""
        return tuple(sorted(self.decoded))


@dataclass(frozen=True)
class GenerationStats:
    run: int
    generation: int
    best_f1: float
    mean_f1: float
    best_bands: tuple[int, ...]

    def to_row(self) -> dict[str, Any]:
        return {
            "run": self.run,
            "generation": self.generation,
            "best_f1": self.best_f1,
            "mean_f1": self.mean_f1,
            "best_bands": ";".join(str(band) for band in self.best_bands),
        }


@dataclass
class GaResult:
    best: Chromosome
    best_run: int
    history: list[GenerationStats] = field(default_factory=list)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def run_rng(seed: int, run: int) -> np.random.Generator:
    """Independent stream for one run, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(run + 1)[run])


class GeneticBandOptimizer:
    """Binary tournament, Laplace crossover, power mutation and elitism over band indices.

    Genes are reals in [0, n_bands - 1]; decoding rounds half up and repairs
    collisions (with other genes or fixed bands) to the nearest unused index,
    scanning outward and preferring the lower side.
    """

    def __init__(
        self,
        config: GaConfig,
        n_bands: int,
        fixed_bands: Sequence[int] = (),
        max_parallel_tasks: int = 4,
    ) -> None:
        self.config = config
        self.n_bands = n_bands
        self.fixed_bands = tuple(int(band) for band in fixed_bands)
        self.max_parallel_tasks = max(1, max_parallel_tasks)
        self.lo = 0.0
        self.hi = float(n_bands - 1)

        available = n_bands - len(set(self.fixed_bands))
        if available < config.k:
            raise ValueError(
                f"infeasible search space: {config.k} bands requested, "
                f"{available} of {n_bands} bands available after fixed bands"
            )

    def repair(self, genes: np.ndarray) -> Chromosome:
        """Clamp genes, decode them, and move colliding genes to the nearest free index."""
        clamped = np.clip(np.asarray(genes, dtype=np.float64), self.lo, self.hi)
        used = set(self.fixed_bands)
        decoded: list[int] = []
        for position, gene in enumerate(clamped):
            index = round_half_up(float(gene))
            if index in used:
                index = self._nearest_free(index, used)
                clamped[position] = float(index)
            used.add(index)
            decoded.append(index)
        return Chromosome(genes=clamped, decoded=tuple(decoded))

    def _nearest_free(self, index: int, used: set[int]) -> int:
        for distance in range(1, self.n_bands):
            for candidate in (index - distance, index + distance):
                if 0 <= candidate < self.n_bands and candidate not in used:
                    return candidate
        raise ValueError("no free band index left")

    def init_population(self, rng: np.random.Generator) -> list[Chromosome]:
        return [
            self.repair(rng.uniform(self.lo, self.hi, size=self.config.k))
            for _ in range(self.config.population)
        ]

    def tournament_select(self, population: Sequence[Chromosome], rng: Any) -> Chromosome:
        """Draw two members with replacement; the fitter wins, ties go to the first draw."""
        if not population:
            raise ValueError("tournament on an empty population")
        first = population[int(rng.integers(len(population)))]
        second = population[int(rng.integers(len(population)))]
        if first.fitness is None or second.fitness is None:
            raise ValueError("tournament needs evaluated fitness")
        return second if second.fitness > first.fitness else first

    def laplace_crossover(self, p1: Chromosome, p2: Chromosome, rng: Any) -> tuple[Chromosome, Chromosome]:
        if rng.random() >= self.config.crossover_prob:
            return self.repair(p1.genes.copy()), self.repair(p2.genes.copy())

        k = p1.genes.size
        u = 1.0 - np.asarray(rng.random(k), dtype=np.float64)
        r = np.asarray(rng.random(k), dtype=np.float64)
        log_u = np.log(u)
        beta = np.where(
            r <= 0.5,
            self.config.laplace_a - self.config.laplace_b * log_u,
            self.config.laplace_a + self.config.laplace_b * log_u,
        )
        spread = beta * np.abs(p1.genes - p2.genes)
        return self.repair(p1.genes + spread), self.repair(p2.genes + spread)

    def power_mutation(self, chromosome: Chromosome, rng: Any) -> Chromosome:
        k = chromosome.genes.size
        mutate = np.asarray(rng.random(k), dtype=np.float64) < self.config.mutation_prob
        if not mutate.any():
            return self.repair(chromosome.genes.copy())

        x = chromosome.genes
        s = np.asarray(rng.random(k), dtype=np.float64) ** self.config.power_p
        r = np.asarray(rng.random(k), dtype=np.float64)
        t = (x - self.lo) / (self.hi - self.lo) if self.hi > self.lo else np.zeros(k)
        moved = np.where(r < t, x - s * (x - self.lo), x + s * (self.hi - x))
        return self.repair(np.where(mutate, moved, x))

    async def _evaluate(
        self,
        population: list[Chromosome],
        fitness_fn: FitnessFn,
        cache: dict[tuple[int, ...], float],
        generation: int,
    ) -> None:
        pending: dict[tuple[int, ...], list[int]] = {}
        for index, chromosome in enumerate(population):
            key = chromosome.band_set
            if key in cache:
                chromosome.fitness = cache[key]
            else:
                pending.setdefault(key, []).append(index)

        semaphore = asyncio.Semaphore(self.max_parallel_tasks)

        async def _run(key: tuple[int, ...]) -> tuple[tuple[int, ...], float]:
            async with semaphore:
                try:
                    value = await asyncio.to_thread(fitness_fn, key)
                except Exception as exc:
                    raise FitnessEvaluationError(f"generation {generation}, bands {list(key)}: {exc}") from exc
                return key, float(value)

        for key, value in await asyncio.gather(*(_run(key) for key in pending)):
            cache[key] = value
            for index in pending[key]:
                population[index].fitness = value

    def _stalled(self, history: list[GenerationStats]) -> bool:
        window = self.config.stall_window
        if len(history) <= window:
            return False
        recent = [stats.best_f1 for stats in history[-(window + 1):]]
        mean_change = float(np.mean(np.abs(np.diff(recent))))
        return mean_change < self.config.stall_tol

    async def evolve_async(
        self,
        fitness_fn: FitnessFn,
        rng: np.random.Generator,
        run: int = 0,
        cache: dict[tuple[int, ...], float] | None = None,
    ) -> tuple[Chromosome, list[GenerationStats]]:
        cache = {} if cache is None else cache
        population = self.init_population(rng)
        history: list[GenerationStats] = []
        best: Chromosome | None = None

        for generation in range(self.config.max_generations):
            await self._evaluate(population, fitness_fn, cache, generation)
            order = sorted(range(len(population)), key=lambda i: -float(population[i].fitness))
            leader = population[order[0]]
            if best is None or float(leader.fitness) > float(best.fitness):
                best = replace(leader, genes=leader.genes.copy())

            history.append(
                GenerationStats(
                    run=run,
                    generation=generation,
                    best_f1=float(best.fitness),
                    mean_f1=float(np.mean([c.fitness for c in population])),
                    best_bands=best.band_set,
                )
            )
            if generation % 10 == 0:
                log(f"GA run {run} generation {generation}: best={best.fitness:.4f} bands={list(best.band_set)}")
            if self._stalled(history) or generation == self.config.max_generations - 1:
                break

            next_population = [replace(population[i], genes=population[i].genes.copy()) for i in order[: self.config.elite_count]]
            while len(next_population) < self.config.population:
                first = self.tournament_select(population, rng)
                second = self.tournament_select(population, rng)
                child_a, child_b = self.laplace_crossover(first, second, rng)
                next_population.append(self.power_mutation(child_a, rng))
                if len(next_population) < self.config.population:
                    next_population.append(self.power_mutation(child_b, rng))
            population = next_population

        assert best is not None
        log(f"GA run {run} finished after {len(history)} generations: best={best.fitness:.4f}")
        return best, history

    def evolve(self, fitness_fn: FitnessFn, seed: int | None = None) -> tuple[Chromosome, list[GenerationStats]]:
        """Single run; uses the same stream as run 0 of multi_run."""
        rng = run_rng(self.config.seed if seed is None else seed, 0)
        return asyncio.run(self.evolve_async(fitness_fn, rng))

    async def multi_run_async(self, fitness_fn: FitnessFn) -> GaResult:
        """Independent runs seeded from the master seed; best fitness wins, ties go to the lowest run."""
        cache: dict[tuple[int, ...], float] = {}
        result: GaResult | None = None
        history: list[GenerationStats] = []
        for run in range(self.config.runs):
            best, run_history = await self.evolve_async(fitness_fn, run_rng(self.config.seed, run), run, cache)
            history.extend(run_history)
            if result is None or float(best.fitness) > float(result.best.fitness):
                result = GaResult(best=best, best_run=run)
        assert result is not None
        result.history = history
        return result

    def multi_run(self, fitness_fn: FitnessFn) -> GaResult:
        return asyncio.run(self.multi_run_async(fitness_fn))
