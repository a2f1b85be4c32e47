"""
Volumes, normalization, pad/crop, and MetaImage -> NIfTI conversion
===================================================================

Builds a small 16-bit volume, walks it through min-max normalization and
transverse pad/crop, then round-trips it through both file formats.
"""

import tempfile
from pathlib import Path

import numpy as np

from voxelforge import (
    Volume,
    convert,
    minmax_normalize,
    pad_or_crop,
    read_mhd,
    read_nifti,
    write_nifti,
)

work = Path(tempfile.mkdtemp(prefix="voxelforge-demo-"))

# a 16-bit "scan": a bright box on a dark background
voxels = np.zeros((8, 40, 30), dtype=np.uint16)
voxels[2:6, 10:30, 8:22] = 30000
voxels[3:5, 15:25, 12:18] = 52000
scan = Volume(voxels=voxels, spacing=(2.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
print(f"scan: shape={scan.shape} spacing={scan.spacing} domain={scan.intensity_domain}")

# min-max normalization maps onto [0, 1] and records the original range
unit = minmax_normalize(scan)
print(f"normalized: range [{unit.voxels.min()}, {unit.voxels.max()}], "
      f"raw_range={unit.raw_range}")

# pad/crop centres the transverse plane on a fixed shape; here 48x48 pads
# height by 4+4 and width by 9+9, and world coordinates are preserved
framed = pad_or_crop(unit, (48, 48))
print(f"pad/crop to 48x48: shape={framed.shape} origin={framed.origin}")
same_voxel = (
    unit.index_to_world(np.array([2.0, 10.0, 8.0])),
    framed.index_to_world(np.array([2.0, 14.0, 17.0])),
)
print(f"world position drift after pad: {np.abs(same_voxel[0] - same_voxel[1]).max():.2e} mm")

# write the scan as MetaImage (header + raw payload)
header = work / "scan.mhd"
raw = work / "scan.raw"
header.write_text(
    "ObjectType = Image\n"
    "NDims = 3\n"
    f"DimSize = {scan.width} {scan.height} {scan.depth}\n"
    "ElementType = MET_USHORT\n"
    "ElementSpacing = 1 1 2\n"
    "Offset = 0 0 0\n"
    f"ElementDataFile = {raw.name}\n"
)
raw.write_bytes(np.ascontiguousarray(scan.voxels, dtype="<u2").tobytes())

# convert to self-contained NIfTI-1 and read both back
nifti = work / "scan.nii.gz"
convert(header, nifti)
from_mhd = read_mhd(header)
from_nifti = read_nifti(nifti)
print(f"conversion lossless: {np.array_equal(from_mhd.voxels, from_nifti.voxels)}")

# NIfTI round trips are bit-exact on the payload
write_nifti(unit, work / "unit.nii.gz")
again = read_nifti(work / "unit.nii.gz")
print(f"nifti round-trip bit-exact: {np.array_equal(again.voxels, unit.voxels)}")
print(f"artifacts in {work}")
