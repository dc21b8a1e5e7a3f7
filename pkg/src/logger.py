import logging
import os
from datetime import datetime
from typing import Any, Optional


class IgnnLogger:
    """Logging for equilibrium solves, training epochs and well-posedness checks."""

    def __init__(self, log_dir: Optional[str] = "logs", log_level: str = "INFO"):
        """Initialize the logger.

        Args:
            log_dir: Directory to store log files (None logs to the console only)
            log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        """
        self.log_dir = log_dir
        self.log_level = getattr(logging, log_level.upper())

        # Set up logger
        self.logger = logging.getLogger('ignn')
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False

        # Clear existing handlers
        self.logger.handlers.clear()

        # Create formatters
        detailed_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        )
        simple_formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s'
        )

        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
            file_handler = logging.FileHandler(
                os.path.join(log_dir, f'ignn_{datetime.now().strftime("%Y%m%d")}.log')
            )
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(detailed_formatter)
            self.logger.addHandler(file_handler)

        # Console handler for user-friendly output
        console_handler = logging.StreamHandler()
        console_handler.setLevel(self.log_level)
        console_handler.setFormatter(simple_formatter)
        self.logger.addHandler(console_handler)

    def debug(self, message: str) -> None:
        """Log debug message."""
        self.logger.debug(message)

    def info(self, message: str) -> None:
        """Log info message."""
        self.logger.info(message)

    def warning(self, message: str) -> None:
        """Log warning message."""
        self.logger.warning(message)

    def error(self, message: str) -> None:
        """Log error message."""
        self.logger.error(message)

    def critical(self, message: str) -> None:
        """Log critical message."""
        self.logger.critical(message)

    def log_solve(self, kind: str, iterations: int, residual: float,
                  layer: Optional[int] = None) -> None:
        """Log a finished fixed-point solve."""
        where = f" layer {layer}" if layer is not None else ""
        self.debug(f"SOLVE: {kind}{where} iterations={iterations} residual={residual:.3e}")

    def log_epoch(self, epoch: int, loss: float, train_f1: float, val_f1: float,
                  fwd_iters: int, bwd_iters: int, seconds: float) -> None:
        """Log one training epoch."""
        self.info(f"EPOCH {epoch}: loss={loss:.6f} train_f1={train_f1:.4f} "
                  f"val_f1={val_f1:.4f} fwd_iters={fwd_iters} bwd_iters={bwd_iters} "
                  f"time={seconds:.3f}s")

    def log_wellposed(self, report: Any, layer: Optional[int] = None) -> None:
        """Log a well-posedness report."""
        where = f" layer {layer}" if layer is not None else ""
        self.info(f"WELLPOSED{where}: product={report.product:.6g} "
                  f"pf_holds={report.pf_holds} tractable_holds={report.tractable_holds}")
        for note in report.condition_notes:
            self.debug(f"WELLPOSED{where}: {note}")

    def log_constraint(self, layer: int, norm: float, radius: float) -> None:
        """Log the weight norm against its projection radius."""
        self.debug(f"CONSTRAINT: layer {layer} inf_norm(W)={norm:.6f} radius={radius:.6f}")

    def log_error(self, error: Exception, context: str = "") -> None:
        """Log error with context."""
        message = f"ERROR in {context}: {str(error)}"
        self.error(message)

    def cleanup(self) -> None:
        """Clean up logger resources."""
        for handler in self.logger.handlers[:]:
            handler.close()
            self.logger.removeHandler(handler)
