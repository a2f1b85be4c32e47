"""voxelforge: volumetric preprocessing, registration, patching and evaluation.

The package mirrors the stages of an MRI-to-CT translation data pipeline:
format conversion (MetaImage to NIfTI-1), rigid mutual-information
coregistration, CT cleanup, patch/slice export to CRC-framed record files,
loss and image-quality metrics, and network shape-table verification.
"""

from .volume import (
    RAW16_MAX,
    CropPadPlan,
    IntensityDomain,
    Volume,
    minmax_normalize,
    pad_or_crop,
)
from .formats import convert, read_mhd, read_nifti, write_nifti
from .register import (
    RegistrationConfig,
    RegistrationResult,
    RigidTransform,
    mutual_information,
    register,
    resample,
)
from .morph import clean_ct, fill_holes, trim_slices
from .patches import (
    AggregationBuffer,
    PatchPair,
    aggregate,
    extract_pairs,
    make_boost_weights,
)
from .losses import (
    EvalReport,
    LossWeights,
    adversarial_lsq,
    adversarial_minmax,
    combined_loss,
    evaluate,
    evaluate_pairs,
    gdl,
    mae,
    mse,
    psnr,
    spatial_gradient,
)
from .netshape import LayerSpec, ShapeTable, infer_shape, load_builtin_tables, verify_table
from .records import (
    ExamplePayload,
    RecordWriter,
    crc32c,
    decode_example,
    encode_example,
    masked_crc32c,
    read_example_records,
    read_records,
    write_example_records,
    write_records,
)
from .pipeline import PipelineManifest, PipelineRunner, load_manifest

__version__ = "0.1.0"
