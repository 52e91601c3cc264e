import os
import sys

# Single-threaded BLAS keeps runs bit-reproducible; must be set before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from slider_quant.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
