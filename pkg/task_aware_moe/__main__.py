#!/usr/bin/env python3
"""Allow ``python -m task_aware_moe``."""

from task_aware_moe.cli import main

if __name__ == '__main__':
    main()
