import os

# Single-threaded BLAS keeps reductions bit-reproducible across identical runs.
# Must happen before numpy is imported anywhere in the test session.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
