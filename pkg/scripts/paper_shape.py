"""Generate the full-shape dataset and print its composition.

Also encodes one sample per class at 136x136 into PGMs so the full-resolution
images can be inspected.  Training the full-shape network is left to
``fdia-imaging pipeline --config paper``; in pure NumPy on one core it takes days.
"""
import sys
import time
from pathlib import Path

from fdia_imaging.config import load_config
from fdia_imaging.pipeline import export_samples, make_dataset, split

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/paper_shape")
cfg = load_config("paper")
t0 = time.perf_counter()
ds = make_dataset(cfg)
print(f"generated in {time.perf_counter() - t0:.1f} s")
print(f"samples {len(ds)}  features {ds.n_features}  classes {ds.n_classes}")
for name, n in ds.class_counts().items():
    print(f"  {name:>8} {n}")
tr, te = split(cfg, ds)
print(f"train {len(tr)}  test {len(te)}")
for p in export_samples(cfg, ds, out):
    print("wrote", p)
