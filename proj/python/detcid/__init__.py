"""Synthetic cell images, adversarial region proposals and mask detection."""

try:
    from . import _detcid as _ext
except ImportError:  # built in-tree, module on PYTHONPATH
    import _detcid as _ext

DetcidError = _ext.DetcidError
Detector = _ext.Detector

toy_sample = _ext.toy_sample
synthesize_toy_dataset = _ext.synthesize_toy_dataset
load_sample = _ext.load_sample
list_ids = _ext.list_ids

mask_iou = _ext.mask_iou
modified_iou = _ext.modified_iou
dice = _ext.dice
average_precision = _ext.average_precision
bland_altman = _ext.bland_altman
rle_encode = _ext.rle_encode
rle_decode = _ext.rle_decode
evaluate = _ext.evaluate

__all__ = [
    "DetcidError",
    "Detector",
    "average_precision",
    "bland_altman",
    "dice",
    "evaluate",
    "list_ids",
    "load_sample",
    "mask_iou",
    "modified_iou",
    "rle_decode",
    "rle_encode",
    "synthesize_toy_dataset",
    "toy_sample",
]
