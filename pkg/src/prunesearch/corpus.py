"""Deterministic byte corpus and batch extraction.

The built-in corpus is synthetic English-like prose generated from a fixed
word list with a Zipf-shaped frequency profile: reproducible everywhere,
no data files, and enough byte-level structure (common words, punctuation,
capitalization) for a small byte LM to learn.  A real text file can be
supplied instead via a path.
"""

import numpy as np

from .errors import InputError

_WORDS = (
    "the of and to in is was for on that with as his they at be this had not are "
    "but from or have an which one you were all her she there would their we him "
    "been has when who will no more if out so up said what its about than into "
    "them can only other time new some could these two may first then do any "
    "like my now over such our man me even most made after also did many before "
    "must through years where much your way well down should because each just "
    "those people how too little state good very make world still own see men "
    "work long here get both between life being under never day same another "
    "know while last might us great old year off come since against go came "
    "right used take three house small found every water thought again place "
    "around hand high system each point given number part turn room end why "
    "asked went look back form light kind need grow story learn plant cover "
    "food sun four keep eye change close answer sea press problem complete "
    "ship area half rock order fire south piece told knew pass farm top whole "
    "king size heard best hour better true during hundred five remember step "
    "early hold west ground interest reach fast listen wind travel morning "
    "letter until mile river car feet care second group carry took science eat "
    "friend began idea fish mountain stop once base hear horse cut sure watch "
    "color face wood main open seem together next white children begin got walk "
    "example ease paper music mark note wait plan figure star box noun field "
    "rest correct able pound done beauty drive stood contain front teach week "
    "final gave green quick develop ocean warm free minute strong special mind "
    "behind clear tail produce fact street inch multiply nothing course stay "
    "wheel full force blue object decide surface deep moon island foot yet busy "
    "test record boat common gold possible plane stead dry wonder laugh "
    "thousand ago ran check game shape equate hot miss brought heat snow tire "
    "bring yes distant fill east paint language among"
).split()

_TERMINALS = (".", ".", ".", ".", "?", "!")


def generate_text(seed=0, size=1 << 20):
    """Deterministic prose of exactly `size` bytes."""
    if size < 1:
        raise InputError("corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(_WORDS)
    freq = 1.0 / np.arange(1, n + 1)
    cdf = np.cumsum(freq / freq.sum())
    out = bytearray()
    sentences_in_par = 0
    par_target = int(rng.integers(3, 8))
    while len(out) < size + 64:
        length = int(rng.integers(4, 13))
        idx = np.searchsorted(cdf, rng.random(length), side="right")
        words = [_WORDS[i] for i in np.minimum(idx, n - 1)]
        words[0] = words[0].capitalize()
        parts = []
        for w_i, w in enumerate(words):
            parts.append(w)
            if w_i < length - 1 and rng.random() < 0.08:
                parts[-1] += ","
        sentence = " ".join(parts) + _TERMINALS[rng.integers(len(_TERMINALS))]
        out += sentence.encode("ascii")
        sentences_in_par += 1
        if sentences_in_par >= par_target:
            out += b"\n\n"
            sentences_in_par = 0
            par_target = int(rng.integers(3, 8))
        else:
            out += b" "
    return bytes(out[:size])


def load_corpus(path=None, seed=0, size=1 << 20):
    """Token array (int64 byte values) from a file or the generator."""
    if path:
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 256:
            raise InputError(f"corpus file {path} is too small ({len(data)} bytes)")
    else:
        data = generate_text(seed=seed, size=size)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def split_corpus(tokens, fractions=(0.90, 0.05, 0.05)):
    """Contiguous train/calibration/heldout split."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError("fractions must be three values summing to 1")
    n = tokens.shape[0]
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return tokens[:a], tokens[a:b], tokens[b:]


def eval_sequences(split, n, length):
    """n sequences of `length` tokens at evenly spaced offsets. Deterministic."""
    max_off = split.shape[0] - length
    if n < 1 or max_off < 0:
        raise InputError("split too small for the requested sequences")
    offsets = np.floor(np.linspace(0, max_off, n)).astype(np.int64)
    return np.stack([split[o: o + length] for o in offsets])


def sample_sequences(split, rng, n, length):
    """n sequences at rng-chosen offsets (training batches)."""
    max_off = split.shape[0] - length
    if max_off < 0:
        raise InputError("split too small for the requested length")
    offsets = rng.integers(0, max_off + 1, size=n)
    return np.stack([split[o: o + length] for o in offsets])
