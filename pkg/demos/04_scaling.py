"""Per-iteration cost grows linearly with series length.

Times a few EM iterations at increasing T and prints the ratio to the
shortest length.  Pin BLAS to one thread for stable numbers, e.g.
``OMP_NUM_THREADS=1 python3 demos/04_scaling.py``.
"""
from missnet.evaluation import scaling_benchmark

rows = scaling_benchmark(lengths=(500, 1000, 2000, 4000), n_iter=3, N=20, L=5)
base = rows[0]["median_seconds"] / rows[0]["T"]
for r in rows:
    print(f"T={r['T']:5d}  {r['median_seconds']:.3f} s/iteration  "
          f"(x{r['median_seconds'] / (base * rows[0]['T']):.2f}, linear would be x{r['T'] / rows[0]['T']:.0f})")
