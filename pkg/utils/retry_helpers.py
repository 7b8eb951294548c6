"""
Retry utilities for master-equation integration.

A failed solve_ivp run (step-size underflow, too many steps, non-finite
state) is retried with the next method of the configured fallback chain,
e.g. DOP853 -> Radau.
"""
import logging
from typing import Callable, Sequence, Type, Tuple, TypeVar

from tenacity import (
    RetryCallState,
    Retrying,
    after_log,
    before_sleep_log,
    stop_after_attempt,
    wait_none,
)

from utils.errors import IntegrationError

logger = logging.getLogger(__name__)

T = TypeVar("T")

RETRYABLE_INTEGRATION_EXCEPTIONS: Tuple[Type[Exception], ...] = (
    IntegrationError,
    FloatingPointError,
)


def is_retryable_integration_error(retry_state: RetryCallState) -> bool:
    """
    Check whether a failed integration should be retried with another method.

    Retryable:
    - IntegrationError (solver reported failure)
    - FloatingPointError (overflow in the right-hand side)

    Non-retryable:
    - everything else (bad inputs are not fixed by switching solvers)
    """
    if retry_state.outcome is None:
        return False
    exception = retry_state.outcome.exception()
    if exception is None:
        return False
    if isinstance(exception, RETRYABLE_INTEGRATION_EXCEPTIONS):
        logger.warning(f"Integration failed: {exception}; switching solver")
        return True
    return False


def run_with_fallback(solve: Callable[[str], T], methods: Sequence[str]) -> T:
    """
    Call solve(method) for each method in turn until one succeeds.

    Args:
        solve: Integration routine taking a solve_ivp method name
        methods: Fallback chain, tried in order

    Returns:
        Result of the first successful call

    Raises:
        IntegrationError: Re-raised from the last method when all fail
        ValueError: If methods is empty
    """
    if not methods:
        raise ValueError("at least one integration method is required")

    retrying = Retrying(
        wait=wait_none(),
        stop=stop_after_attempt(len(methods)),
        retry=is_retryable_integration_error,
        before_sleep=before_sleep_log(logger, logging.WARNING),
        after=after_log(logger, logging.DEBUG),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            method = methods[attempt.retry_state.attempt_number - 1]
            logger.debug(f"Integrating with {method}")
            return solve(method)
    raise IntegrationError("integration retry loop exited without a result")  # pragma: no cover


