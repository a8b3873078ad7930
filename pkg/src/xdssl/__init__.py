"""Cross-domain self-supervised pretraining for ultrasound bone segmentation.

Masked-image-modelling and temporally masked contrastive pretraining on an
unlabeled target domain, supervised fine-tuning on a labelled source domain,
and confidence-weighted fusion of the two fine-tuned branches.
"""

__version__ = "0.1.0"
