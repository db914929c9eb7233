"""
Stacked co-attention between words and regions
==============================================

Words are encoded by a bidirectional LSTM, regions by a linear map. Each
co-attention layer lets every word attend over regions and every region over
words, then fuses the attended features back in with a residual connection.
"""

import numpy as np

from mtvl.data import VOCAB, collate_images, collate_sentences, generate_world
from mtvl.encoder import EncoderParams, coattend, encode, encode_regions, encode_sentence

np.set_printoptions(precision=3, suppress=True)

world = generate_world(seed=1, world_id=0)
params = EncoderParams.init(np.random.default_rng(0), len(VOCAB), d=16, depth=3, d_in=16)

sb = collate_sentences([world.caption])
ib = collate_images([world])
S0 = encode_sentence(sb.ids[0], params)
I0 = encode_regions(ib.features[0], params)
print("word states", S0.shape, "region states", I0.shape)

att = coattend(S0, I0)
print("\nattention of each word over regions (rows sum to 1):")
for word, row in zip(world.caption, att.over_regions.data):
    print(f"{word:>9}", row)

states = encode(S0, I0, params)
for st in states:
    drift = np.linalg.norm(st.S.data - S0.data) / np.linalg.norm(S0.data)
    print(f"layer {st.l}: relative change of word states {drift:.3f}")
