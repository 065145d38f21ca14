"""Cell execution, sequential or on a bounded pool of worker threads."""

from __future__ import annotations

import asyncio
import time
from typing import TYPE_CHECKING

from quadfault.exceptions import ConfigError
from quadfault.log import get_logger
from quadfault.models import BatchResult, CellResult


if TYPE_CHECKING:
    from collections.abc import Sequence

    from quadfault.models import Cell


logger = get_logger("executor")


def run_cell(cell: Cell) -> CellResult:
    """Run one cell, capturing any error in the result.

    Args:
        cell: Cell to run

    Returns:
        CellResult with the report or the error message
    """
    start = time.perf_counter()
    try:
        report = cell.run()
    except Exception as e:  # noqa: BLE001
        logger.warning("Cell %s failed: %s", cell.key, e)
        return CellResult(
            cell=cell,
            success=False,
            error=f"{type(e).__name__}: {e}",
            duration=time.perf_counter() - start,
        )
    duration = time.perf_counter() - start
    logger.info("Cell %s finished in %.1fs", cell.key, duration)
    return CellResult(cell=cell, success=True, report=report, duration=duration)


def run_cells(
    cells: Sequence[Cell],
    *,
    parallel: bool = False,
    max_workers: int = 4,
    continue_on_error: bool = True,
) -> BatchResult:
    """Run independent cells and collect their results.

    Results come back in submission order whatever order the cells finish in.

    Args:
        cells: Cells to run
        parallel: Run cells concurrently on worker threads
        max_workers: Maximum number of concurrent cells (only used if parallel=True)
        continue_on_error: Keep going after a failed cell (sequential runs only)

    Returns:
        BatchResult with all cell results
    """
    if max_workers < 1:
        msg = f"max_workers must be at least 1, got {max_workers}"
        raise ConfigError(msg)
    if parallel and max_workers > 1:
        return asyncio.run(_run_cells_async(cells, max_workers=max_workers))

    results = []
    for cell in cells:
        result = run_cell(cell)
        results.append(result)
        if not continue_on_error and not result.success:
            break
    return BatchResult.from_results(results)


async def _run_cells_async(cells: Sequence[Cell], *, max_workers: int) -> BatchResult:
    semaphore = asyncio.Semaphore(max_workers)

    async def _run_with_semaphore(cell: Cell) -> CellResult:
        async with semaphore:
            return await asyncio.to_thread(run_cell, cell)

    tasks = [_run_with_semaphore(cell) for cell in cells]
    results = await asyncio.gather(*tasks)
    return BatchResult.from_results(results)
