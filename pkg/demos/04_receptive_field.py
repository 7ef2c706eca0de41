"""How far a single-voxel change reaches into the bottleneck.

Run:  python demos/04_receptive_field.py
"""

from voxreg.network import ArchConfig, build_network, bottleneck_reach

dims, voxel = (64, 64, 64), (32, 32, 32)
print("levels  dilations  reach (voxels)")
for levels in (3, 4):
    for rates in ((1, 1, 1), (1, 2, 4), (1, 2, 4, 8)):
        cfg = ArchConfig(levels=levels, dilation_rates=rates, base_channels=4, max_channels=16, branch_channels=4)
        print(f"{levels:6d}  {str(rates):>12s}  {bottleneck_reach(build_network(cfg), dims, voxel):4d}")
