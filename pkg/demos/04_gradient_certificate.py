"""Check every hand-written adjoint against central finite differences.

Then break one on purpose and watch the harness catch it.
"""

from flowweld import gradcheck as gc

for rep in gc.run_suite(seed=0):
    print(rep.summary())

print("\nwith the SO adjoint doubled:")
for rep in gc.run_suite(seed=0, sample_count=20, fault="so", ops=("so", "tv")):
    print(rep.summary())
