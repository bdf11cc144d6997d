from capret.data.manifest import (
    SPLITS,
    DatasetManifest,
    ImageCaptionRecord,
    ManifestError,
    load_manifest,
    merge_datasets,
)
from capret.data.vocab import (
    BOS,
    EOS,
    IMG,
    PAD,
    RET,
    UNK,
    Vocabulary,
    build_vocabulary,
    detokenize,
    normalize_caption,
    tokenize,
)
from capret.data.images import load_and_preprocess_image, preprocess_array
from capret.data.synthetic import (
    OBJECT_COLORS,
    SCENE_CLASSES,
    SyntheticSceneSpec,
    generate_synthetic_dataset,
)

__all__ = [
    "SPLITS",
    "DatasetManifest",
    "ImageCaptionRecord",
    "ManifestError",
    "load_manifest",
    "merge_datasets",
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "IMG",
    "RET",
    "Vocabulary",
    "build_vocabulary",
    "tokenize",
    "detokenize",
    "normalize_caption",
    "load_and_preprocess_image",
    "preprocess_array",
    "SCENE_CLASSES",
    "OBJECT_COLORS",
    "SyntheticSceneSpec",
    "generate_synthetic_dataset",
]
