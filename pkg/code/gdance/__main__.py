"""
python -m gdance 入口

GDANCE_THREADS 需要在导入 numpy 之前写入 BLAS 线程环境变量才会生效。
"""

import os
import sys

from dotenv import load_dotenv

load_dotenv()
_threads = os.getenv('GDANCE_THREADS', '1')
for _name in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_name, _threads)

from .cli import main  # noqa: E402

if __name__ == '__main__':
    sys.exit(main())
