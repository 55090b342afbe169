# coding: utf-8

# # Set encoders and permutation invariance
#
# An observation in the scavenger task is a handful of food positions. Their
# order carries no information, so a good encoder should not care about it.
# Here we compare three encoders on the same set of objects.

import itertools

import numpy as np

from exchangeable.encoder import (
    AttentionEncoderParams,
    DeepSetsParams,
    attention_as_sum_form,
    encode_attention,
    encode_deepsets,
    encode_ordered,
)

rng = np.random.default_rng(0)
objects = rng.normal(size=(4, 2))
print("objects\n", objects)


# ## Attention pooling
#
# Each object gets a scalar score from the filter network; the scores go
# through a softmax and weight the per-object features from the input network.

params = AttentionEncoderParams.init(d=2, k=6, hidden=(16, 16), rng=rng)
s_star, trace = encode_attention(params, objects)
print("attention weights", np.round(trace.w, 4), "sum", trace.w.sum())
print("pooled vector    ", np.round(s_star.data, 4))


# Every one of the 4! = 24 orderings gives the same vector, up to rounding.

outs = np.array([encode_attention(params, objects[list(p)])[0].data for p in itertools.permutations(range(4))])
print("max spread over 24 orderings:", np.abs(outs - outs[0]).max())


# The same pooled vector can be written as rho(sum_j phi(s_j)), where phi
# carries the exponentiated score alongside the weighted features and rho divides
# them out.

print("gap to the sum form:", np.abs(attention_as_sum_form(params, objects) - s_star.data).max())


# ## Deep Sets
#
# Plain sum pooling followed by a readout network is invariant too.

ds = DeepSetsParams.init(d=2, k=6, hidden=(16,), rng=rng)
a = encode_deepsets(ds, objects).data
b = encode_deepsets(ds, objects[::-1]).data
print("deep sets, reversed order gap:", np.abs(a - b).max())


# ## The ordered baseline
#
# Concatenating slots in arrival order is what a plain MLP policy sees. Swapping
# two objects changes its input, so the network has to learn the symmetry.

print("ordered         ", encode_ordered(objects, 5))
print("ordered, swapped", encode_ordered(objects[[1, 0, 2, 3]], 5))
