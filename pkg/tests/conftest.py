import os

# keep BLAS single-threaded: the Monte Carlo suites parallelize across
# processes, and oversubscription slows the whole run down
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
