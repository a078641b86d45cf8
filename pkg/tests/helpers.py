"""Shared test utilities: drive P rank callables over a transport group."""

import threading

from ppf.transport import make_group


def run_ranks(size, fn, kind="inproc"):
    """Run fn(rank, endpoint) on every rank concurrently; return results by rank.

    Exceptions from any rank are re-raised on the caller's thread.
    """
    group = make_group(kind, size)
    results = [None] * size
    failures = []

    def worker(r):
        try:
            results[r] = fn(r, group.endpoint(r))
        except Exception as err:  # noqa: BLE001 - surfaced below
            failures.append((r, err))

    try:
        if size == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(r,)) for r in range(size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        group.close()
    if failures:
        rank, err = failures[0]
        raise AssertionError(f"rank {rank} raised {err!r}") from err
    return results
