#!/usr/bin/env python3
"""Preflight check for the numeric stack in the active Python environment."""

from __future__ import annotations

import sys


def _print_fix_steps() -> None:
    print("Fix steps:")
    print("  1) Create and activate a venv:")
    print("     python3 -m venv .venv")
    print("     source .venv/bin/activate")
    print("  2) Install a CPU build of torch plus numpy:")
    print("     pip install --index-url https://download.pytorch.org/whl/cpu torch")
    print("     pip install -r requirements.txt")
    print("  3) Re-run this check from the same activated venv:")
    print("     python scripts/check_torch.py")


def main() -> int:
    try:
        import numpy as np
        import torch
    except Exception as exc:
        print("[FAIL] Could not import torch and numpy.")
        print(f"Reason: {exc.__class__.__name__}: {exc}")
        _print_fix_steps()
        return 1

    x = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    (x @ x).sum().backward()
    if x.grad is None or x.grad.dtype != torch.float64:
        print("[FAIL] torch imported but float64 autograd did not produce a float64 gradient.")
        return 1
    if not np.allclose(x.detach().numpy() @ x.detach().numpy(), (x @ x).detach().numpy()):
        print("[FAIL] torch and numpy disagree on a float64 matmul.")
        return 1

    print("[OK] Numeric preflight passed (float64 autograd + numpy interop).")
    print(f"python {sys.version.split()[0]}, torch {torch.__version__}, numpy {np.__version__}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
