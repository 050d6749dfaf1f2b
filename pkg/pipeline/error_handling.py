"""
Exception hierarchy for ingest, training and evaluation, plus retry with
backoff for archive downloads.
"""
import logging
import time
import functools
from typing import Callable, Any, Optional
from enum import Enum

class RetryStrategy(Enum):
    """Retry strategy types"""
    FIXED = "fixed"
    EXPONENTIAL = "exponential"
    LINEAR = "linear"

class ResslError(Exception):
    """Base exception for pretraining/evaluation errors"""
    pass

class ConfigurationError(ResslError, ValueError):
    """Invalid experiment or application configuration"""
    pass

class IngestionError(ResslError):
    """Dataset archive missing, unreadable or with unexpected contents"""
    pass

class ChecksumMismatchError(IngestionError):
    """Archive or packed file does not match its recorded checksum"""
    pass

class DataIterationError(ResslError):
    """Batch iteration over a packed split failed"""
    pass

class NumericError(ResslError, ArithmeticError):
    """Numerically invalid input (zero rows, non-finite values)"""
    pass

class ShapeMismatchError(ResslError, ValueError):
    """Tensors that must agree in shape do not"""
    pass

class QueueStateError(ResslError):
    """Memory queue used in a state that does not allow the operation"""
    pass

class TrainingDivergedError(ResslError):
    """Loss became non-finite during training"""
    pass

class CheckpointError(ResslError):
    """Checkpoint archive missing or inconsistent"""
    pass

class EvaluationError(ResslError):
    """Evaluation could not be carried out"""
    pass

class ExportError(ResslError):
    """Embedding export failed"""
    pass

class PlotError(ResslError):
    """Plot inputs missing or empty"""
    pass

def retry_with_backoff(
    max_retries: int = 3,
    strategy: RetryStrategy = RetryStrategy.EXPONENTIAL,
    base_delay: float = 1.0,
    max_delay: float = 60.0,
    exceptions: tuple = (Exception,),
    logger: Optional[logging.Logger] = None
):
    """
    Retry a dataset archive download on transient failures.

    The wrapped function is called as ``fetch(url, destination, ...)``; log
    lines name the URL. Exceptions outside ``exceptions`` (checksum
    mismatches, bad destinations) propagate on the first attempt.

    Args:
        max_retries: Attempts after the first one
        strategy: Delay growth between attempts
        base_delay: First delay in seconds
        max_delay: Upper bound on any delay
        exceptions: Failures worth another attempt (network errors)
        logger: Receives one warning per failed attempt
    """
    def decorator(fetch: Callable) -> Callable:
        @functools.wraps(fetch)
        def wrapper(*args, **kwargs) -> Any:
            source = args[0] if args else kwargs.get("url", fetch.__name__)
            attempts = max_retries + 1
            for attempt in range(attempts):
                try:
                    return fetch(*args, **kwargs)
                except exceptions as e:
                    if attempt + 1 == attempts:
                        if logger:
                            logger.error(f"Giving up on {source} after {attempts} attempts: {e}")
                        raise
                    delay = retry_delay(strategy, base_delay, max_delay, attempt)
                    if logger:
                        logger.warning(f"Download of {source} failed (attempt {attempt + 1}/{attempts}): {e}; "
                                       f"retrying in {delay:.1f}s")
                    time.sleep(delay)

        return wrapper
    return decorator

def retry_delay(strategy: RetryStrategy, base_delay: float, max_delay: float, attempt: int) -> float:
    """Delay before retry number ``attempt + 1``"""
    if strategy == RetryStrategy.FIXED:
        return base_delay
    if strategy == RetryStrategy.LINEAR:
        return min(base_delay * (attempt + 1), max_delay)
    return min(base_delay * (2 ** attempt), max_delay)
