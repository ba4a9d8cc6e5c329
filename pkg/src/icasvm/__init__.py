"""ICA scores + kernel SVM segmentation of enhancing lesions in dynamic volumes."""

__version__ = "0.1.0"
