import functools
import os
import time
from collections import deque
from typing import Any, Callable, Deque, Dict, Optional

import numpy as np
import psutil

from config import ConfigManager
from logger import IgnnLogger


class PerformanceMonitor:
    """Timing and solver-effort bookkeeping for training runs."""

    def __init__(self, config: Optional[ConfigManager], logger: IgnnLogger):
        """Initialize performance monitor.

        Args:
            config: Configuration manager (may be None)
            logger: Logger instance
        """
        self.config = config
        self.logger = logger

        # Performance monitoring
        self.operation_times: Dict[str, Deque[float]] = {}
        self.solve_iterations: Dict[str, Deque[int]] = {}

        # Performance thresholds
        self.max_forward_time = self._setting("slow_forward_seconds", 5.0)
        self.max_backward_time = self._setting("slow_backward_seconds", 5.0)
        self.max_epoch_time = self._setting("slow_epoch_seconds", 30.0)

        self.process = psutil.Process(os.getpid())
        self.logger.debug("Performance monitor initialized")

    def _setting(self, key: str, default: float) -> float:
        if self.config is None:
            return default
        return float(self.config.get(f"output.{key}", default))

    def time_operation(self, operation_name: str) -> Callable:
        """Decorator to time operations.

        Args:
            operation_name: Name of the operation being timed

        Returns:
            Decorator function
        """
        def decorator(func):
            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                start_time = time.perf_counter()
                try:
                    return func(*args, **kwargs)
                finally:
                    self.record_time(operation_name, time.perf_counter() - start_time)
            return wrapper
        return decorator

    def record_time(self, operation_name: str, duration: float) -> None:
        # Keep only last 100 measurements
        times = self.operation_times.setdefault(operation_name, deque(maxlen=100))
        times.append(duration)
        if duration > self._get_threshold(operation_name):
            self.logger.warning(f"Slow operation detected: {operation_name} took {duration:.3f}s")

    def _get_threshold(self, operation_name: str) -> float:
        thresholds = {
            'forward': self.max_forward_time,
            'backward': self.max_backward_time,
            'epoch': self.max_epoch_time,
        }
        return thresholds.get(operation_name, 10.0)

    def record_solve(self, kind: str, iterations: int) -> None:
        """Record the iteration count of one forward or backward solve."""
        self.solve_iterations.setdefault(kind, deque(maxlen=1000)).append(iterations)

    def get_performance_stats(self) -> Dict[str, Any]:
        """Get performance statistics.

        Returns:
            Dictionary with operation timings, mean solver iterations and memory use
        """
        stats: Dict[str, Any] = {
            'operation_averages': {},
            'solve_iterations': {},
            'slow_operations': [],
            'memory_mb': self.process.memory_info().rss / (1024 * 1024),
        }

        for operation, times in self.operation_times.items():
            if times:
                stats['operation_averages'][operation] = {
                    'mean': float(np.mean(times)),
                    'median': float(np.median(times)),
                    'max': float(np.max(times)),
                    'min': float(np.min(times)),
                    'count': len(times)
                }
                if np.mean(times) > self._get_threshold(operation):
                    stats['slow_operations'].append({
                        'operation': operation,
                        'avg_time': float(np.mean(times)),
                        'threshold': self._get_threshold(operation)
                    })

        for kind, counts in self.solve_iterations.items():
            if counts:
                stats['solve_iterations'][kind] = {
                    'mean': float(np.mean(counts)),
                    'max': int(np.max(counts)),
                    'count': len(counts)
                }
        return stats

    def log_performance_summary(self) -> None:
        stats = self.get_performance_stats()
        self.logger.info(f"PERFORMANCE: memory={stats['memory_mb']:.1f}MB")
        for operation, summary in stats['operation_averages'].items():
            self.logger.info(f"PERFORMANCE: {operation} mean={summary['mean']:.4f}s "
                             f"max={summary['max']:.4f}s n={summary['count']}")
        for kind, summary in stats['solve_iterations'].items():
            self.logger.info(f"PERFORMANCE: {kind} solves mean_iterations={summary['mean']:.1f} "
                             f"max={summary['max']}")
