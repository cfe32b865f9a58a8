"""Generate the two-domain synthetic identity dataset and look at its shape.

The generator draws per-identity centers separately for the source and the
target domain, scatters samples around them with isotropic noise plus a
per-camera offset, and then pushes every target split through one shared
random rotation-plus-offset. Rerunning with the same seed reproduces every
byte.
"""

import numpy as np

from reidapt.data import SynthSpec, generate_synthetic, l2_normalize
from reidapt.evaluate import retrieval_eval

spec = SynthSpec(num_identities=64, samples_per_identity=20, num_cameras=4,
                 d_in=32, identity_spread=1.0, intra_noise=0.6,
                 camera_shift_scale=0.6, domain_shift=12.0, seed=11)
source, train, query, gallery = generate_synthetic(spec)

print("splits:")
for ds in (source, train, query, gallery):
    print(f"  {ds.role:15s} N={len(ds):5d} d_in={ds.d_in} "
          f"identities={len(np.unique(ds.identity))} "
          f"cameras={len(np.unique(ds.camera))}")

# identity sets are disjoint across domains but shared across target splits
assert not set(source.identity) & set(train.identity)
assert set(query.identity) == set(gallery.identity) == set(train.identity)

# within-identity raw distances are much smaller than cross-identity ones
dist = np.linalg.norm(train.raw[:200, None, :] - train.raw[None, :200, :], axis=2)
same = train.identity[:200, None] == train.identity[None, :200]
off = ~np.eye(200, dtype=bool)
print(f"\nmean raw distance, same identity:  {dist[same & off].mean():.2f}")
print(f"mean raw distance, cross identity: {dist[~same].mean():.2f}")

# the raw feature space itself retrieves almost perfectly, because the
# domain shift is an isometry; the challenge exists only for an encoder
# trained on the other domain
result = retrieval_eval(l2_normalize(query.raw), query.identity, query.camera,
                        l2_normalize(gallery.raw), gallery.identity, gallery.camera)
print(f"\nraw-space retrieval: mAP {result.map:.3f}, R1 {result.r1:.3f}")
