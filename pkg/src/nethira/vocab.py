"""Token vocabulary: raw byte values plus special ids.

The token alphabet is the 256 byte values followed by three specials. The
specials always occupy the top three ids of the vocabulary so that shrunken
vocabularies used in tests keep the same layout.
"""

N_BYTE_VALUES = 256

VOCAB_SIZE = 259
PAD_ID = 256
MASK_ID = 257
BOS_ID = 258


def pad_id(vocab_size: int) -> int:
    return vocab_size - 3


def mask_id(vocab_size: int) -> int:
    return vocab_size - 2


def bos_id(vocab_size: int) -> int:
    return vocab_size - 1
