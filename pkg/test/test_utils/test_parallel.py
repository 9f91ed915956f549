import threading
import time

import pytest
from exceptiongroup import ExceptionGroup

from wrfgs.utils import flatten_exception_group, run_parallel


def test_results_keep_input_order():
    def slow_square(x):
        time.sleep(0.001 * (10 - x))
        return x * x

    assert run_parallel(slow_square, range(10), threads=4) == [x * x for x in range(10)]


def test_single_thread_runs_inline():
    seen = []
    run_parallel(lambda _: seen.append(threading.get_ident()), range(3), threads=1)
    assert set(seen) == {threading.get_ident()}


def test_worker_threads_are_used():
    seen = set()
    barrier = threading.Barrier(2, timeout=5)

    def record(_):
        seen.add(threading.get_ident())
        barrier.wait()

    run_parallel(record, range(2), threads=2)
    assert len(seen) == 2


def test_empty_input():
    assert run_parallel(str, [], threads=8) == []


def test_worker_exception_is_reraised():
    def boom(x):
        if x == 3:
            raise FloatingPointError("non-finite value")
        return x

    with pytest.raises(FloatingPointError, match="non-finite"):
        run_parallel(boom, range(6), threads=3)


def test_flatten_exception_group():
    inner = ExceptionGroup("inner", [KeyError("a"), ValueError("b")])
    outer = ExceptionGroup("outer", [inner, TypeError("c")])
    assert [type(e) for e in flatten_exception_group(outer)] == [KeyError, ValueError, TypeError]
