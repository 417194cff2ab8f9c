"""Universal volumetric segmentation engine for partially labeled datasets.

A single model segments every class of a shared taxonomy even though each
training dataset annotates only a subset: per-class segmentation heads are
generated on the fly from class label embeddings, and the loss is computed
only for the classes a case actually annotates.
"""

__version__ = "0.1.0"
