import concurrent.futures
import logging
from typing import Any, Callable, Dict, List, Optional, Tuple

import torch

from config.settings import Settings
from utilities.error_handler import log_error
from utilities.logging_config import configure_logging

logger = logging.getLogger(__name__)


def _worker_init(torch_threads: int) -> None:
    """Runs once in every worker process"""
    configure_logging()
    torch.set_num_threads(max(1, torch_threads))


def _terminate(executor: concurrent.futures.ProcessPoolExecutor) -> None:
    """Cancel queued work and kill running workers without waiting for them"""
    processes = list((executor._processes or {}).values())
    executor.shutdown(wait=False, cancel_futures=True)
    for process in processes:
        process.terminate()
    for process in processes:
        process.join(timeout=10)


class ParallelProcessor:
    """Runs independent tasks in worker processes with error isolation"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or Settings.PARALLEL_WORKERS
        self.torch_threads = Settings.TORCH_THREADS or 1

    def process_batch(
        self,
        tasks: List[Dict],
        process_func: Callable[[Dict], Any],
        timeout: Optional[int] = None,
        on_result: Optional[Callable[[Any, Any], None]] = None
    ) -> Tuple[Dict[Any, Any], Dict[Any, str]]:
        """
        Process tasks in parallel; every task dict needs an 'id'.
        Returns (results, errors): a failed or timed-out task has no entry in
        results and a message in errors. `process_func` must be picklable.
        `on_result(task_id, result)` runs in this process as each task completes.
        On timeout the remaining workers are terminated before returning.
        """
        results, errors = {}, {}
        if not tasks:
            return results, errors
        timeout = timeout or Settings.POINT_TIMEOUT * len(tasks)

        executor = concurrent.futures.ProcessPoolExecutor(
            max_workers=min(self.max_workers, len(tasks)),
            initializer=_worker_init,
            initargs=(self.torch_threads,)
        )
        timed_out = False
        try:
            future_to_id = {
                executor.submit(process_func, task): task['id']
                for task in tasks
            }

            try:
                for future in concurrent.futures.as_completed(future_to_id, timeout=timeout):
                    task_id = future_to_id[future]
                    try:
                        results[task_id] = future.result()
                    except Exception as e:
                        errors[task_id] = f"{type(e).__name__}: {e}"
                        log_error(f"Parallel task {task_id} failed", e)
                        continue
                    if on_result is not None:
                        on_result(task_id, results[task_id])
            except concurrent.futures.TimeoutError:
                timed_out = True
                for future, task_id in future_to_id.items():
                    if task_id not in results and task_id not in errors:
                        errors[task_id] = f"timed out after {timeout}s"
                        log_error(f"Parallel task {task_id} timed out")
        finally:
            if timed_out:
                _terminate(executor)
            else:
                executor.shutdown(wait=True)

        return results, errors
