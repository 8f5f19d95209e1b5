""" Datasets, preprocessing and the synthetic scene generator """
from .preprocess import (
    IMAGENET_NORMALIZATION,
    ReferringDataset,
    Vocabulary,
    compute_normalization,
    flip_expression,
    make_loader,
    preprocess,
    rotate_expression,
    tokenize,
)
from .refcoco import (
    category_histogram,
    convert_refer_annotations,
    iter_refcoco_dir,
    load_refcoco_dir,
    rle_decode,
    rle_encode,
    write_refcoco_dir,
)
from .synthetic import (
    ReferringPhrase,
    SyntheticScene,
    SyntheticSceneSpec,
    generate_synthetic,
)


def split_triplets(triplets, split):
    """The triplets of one split, in order"""
    return [t for t in triplets if t.split == split]
