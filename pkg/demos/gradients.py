"""Finite-difference check of every network block and the loss."""
from pcsod import gradcheck

results = gradcheck.run(gradcheck.BLOCKS, seed=0)
print(gradcheck.format_table(results))
print("all passed" if all(r.passed for r in results) else "some blocks failed")
