#!/usr/bin/env python3
"""
Metadata channel demo
Simple runner script
"""

import os
import sys

# Add the current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from cli import main

if __name__ == '__main__':
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.environ.get('DEMO_OUT', 'demo_out')
    print(f"🔄 Running all demos into {out_dir} ...")
    raise SystemExit(main(['demo', 'all', '--out', out_dir]))
