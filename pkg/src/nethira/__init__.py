"""Traffic classification with hierarchical masked reconstruction.

Pipeline: PCAP captures are segmented into flows, anonymized, and normalized
into fixed-shape byte sequences. A transformer encoder-decoder is pre-trained
by reconstructing byte-, protocol-field- and packet-level corruptions of those
sequences, then fine-tuned for classification with consistency regularization
over protocol- and packet-level augmentations.
"""

__version__ = "0.1.0"
