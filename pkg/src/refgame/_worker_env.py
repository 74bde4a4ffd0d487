"""Pool-worker initializer. Imported before numpy in spawned workers so BLAS
thread pools are capped prior to their first initialization: parallel sweep
workers each run single-threaded math instead of oversubscribing cores."""

import os


def limit_blas_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
