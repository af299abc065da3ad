from .spec import ARCH_KINDS, ModelError, ModelSpec
from .archs import (Model, build_model, cross_entropy, cross_entropy_vector,
                    predict)
from .checkpoint import (BadMagicError, CheckpointError, LengthMismatchError,
                         TruncatedBlobError, load_checkpoint, read_header,
                         save_checkpoint)

__all__ = [
    "ARCH_KINDS", "ModelError", "ModelSpec", "Model", "build_model",
    "cross_entropy", "cross_entropy_vector", "predict",
    "CheckpointError", "BadMagicError", "TruncatedBlobError",
    "LengthMismatchError", "save_checkpoint", "load_checkpoint", "read_header",
]
