# SPDX-License-Identifier: Apache-2.0
"""Fixed-point inference emulation and quantization-aware fine-tuning."""

from fixnet._core import *  # noqa: F401,F403
from fixnet._core import __doc__  # noqa: F401

__version__ = "0.1.0"
