"""
Parallel map for independent numerical cells

Band sweeps over k-points, trajectory batches, torus scans and sweep cells are
embarrassingly parallel. BatchRunner maps a pure function over a list of items
with bounded concurrency and merges results by input index, so the output is
identical for any worker count or completion order.
"""

import asyncio
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

import structlog

from .errors import BlochKamError

logger = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class BatchResult(Generic[R]):
    """Result of a batch map"""
    total: int
    successful: int
    failed: int
    results: List[Optional[R]] = field(default_factory=list)
    errors: List[dict] = field(default_factory=list)
    duration: float = 0.0

    @property
    def exit_code(self) -> int:
        """Return 1 when any cell failed with a domain error."""
        return 1 if self.failed else 0


class BatchRunner:
    """Runs a pure function over items with at most ``max_concurrent`` in flight"""

    def __init__(self, max_concurrent: int = 1):
        """Initialize batch runner

        Args:
            max_concurrent: Maximum number of cells computed at once
        """
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.max_concurrent = max_concurrent

    async def map(
        self,
        func: Callable[[T], R],
        items: Sequence[T],
        capture_errors: bool = False,
    ) -> BatchResult[R]:
        """Apply func to every item

        Args:
            func: Pure function of one item
            items: Work items; result i belongs to items[i]
            capture_errors: Record domain errors per cell instead of raising

        Returns:
            BatchResult with results merged by index
        """
        start_time = time.time()
        semaphore = asyncio.Semaphore(self.max_concurrent)

        async def run_one(index: int, item: T) -> tuple:
            async with semaphore:
                try:
                    if self.max_concurrent == 1:
                        value = func(item)
                    else:
                        value = await asyncio.to_thread(func, item)
                    return index, value, None
                except BlochKamError as e:
                    if not capture_errors:
                        raise
                    logger.warning("Batch cell failed", index=index, error=e.code, message=str(e))
                    return index, None, e

        outcomes = await asyncio.gather(*(run_one(i, item) for i, item in enumerate(items)))
        outcomes = sorted(outcomes, key=lambda outcome: outcome[0])

        results: List[Optional[R]] = [value for _, value, _ in outcomes]
        errors = [
            {"index": str(index), "error": error.code, "message": str(error)}
            for index, _, error in outcomes
            if error is not None
        ]
        duration = time.time() - start_time
        logger.debug("Batch finished", total=len(items), failed=len(errors), duration=duration)
        return BatchResult(
            total=len(items),
            successful=len(items) - len(errors),
            failed=len(errors),
            results=results,
            errors=errors,
            duration=duration,
        )

    def run(self, func: Callable[[T], R], items: Sequence[T], capture_errors: bool = False) -> BatchResult[R]:
        """Synchronous wrapper around map()"""
        return asyncio.run(self.map(func, items, capture_errors=capture_errors))


def parallel_map(func: Callable[[T], Any], items: Sequence[T], workers: int = 1) -> List[Any]:
    """Ordered results of func over items; domain errors propagate."""
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    return list(BatchRunner(max_concurrent=workers).run(func, items).results)
