"""
Query-conditioned convolution kernels
=====================================

How QAtt and PAtt turn one shared weight tensor into kernels that depend on
the query, and why neither adds parameters.
"""

# %%
import numpy as np

from samcnn import encoders as enc
from samcnn.tensor import Tensor, conv1d, positionwise_conv1d, stack

rng = np.random.default_rng(0)
F, k, d, H = 3, 2, 4, 5
U = enc.EncoderParams.init(F, k, d, H, rng, "qatt")

post = Tensor(rng.normal(size=(6, d)))   # six post tokens
query = Tensor(rng.normal(size=(2, d)))  # two query tokens

# %% QAtt: multiply every kernel's last axis by a query token embedding
kernel = enc.make_qatt_kernel(U.weight, query[0])
print("kernel shape", kernel.shape)

# the same thing, as a rescaled input: conv(P, U*q) == conv(P*q, U)
a = conv1d(post, kernel, U.bias).data
b = conv1d(post * query[0], U.weight, U.bias).data
print("largest gap between the two routes:", np.abs(a - b).max())

# %% one representation per query token, then their mean is the attention feature v
out = enc.encode_qatt(post, query, U, n_q=2)
v = np.mean([h.data for h in out.h_list], axis=0)
print("h_i per query token:", len(out.h_list), " v:", np.round(v, 3))

# %% PAtt: the kernel at window j is scaled row by row by cosine similarities
S0 = enc.patt_similarity(query[0], post, j=0, k=k)
print("cosines of query token 0 against post tokens 0..1:", np.round(S0.data, 3))

positions = post.shape[0] - k + 1
kernels = stack([enc.make_patt_kernel(U.weight, enc.patt_similarity(query[0], post, j, k))
                 for j in range(positions)])
print("one kernel per window position:", kernels.shape)
per_position = positionwise_conv1d(post, kernels, U.bias)

# equivalently: scale the rows of each window by its cosines, then convolve with V
scaled = np.stack([
    conv1d(Tensor(post.data[j:j + k] * enc.patt_similarity(query[0], post, j, k).data[:, None]),
           U.weight, U.bias).data[0]
    for j in range(positions)])
print("largest gap:", np.abs(per_position.data - scaled).max())

# %% parameter counts at the default sizes (F=250, k=2, d=300, H=200)
# the attention variants reuse U or V as is, so all three encoders have the same count
print("encoder parameters:", enc.parameter_count(250, 2, 300, 200))
