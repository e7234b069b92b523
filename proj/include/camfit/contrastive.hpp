#pragma once

// Contrastive objective against the queue: softmax cross-entropy over
// [positive | negatives] with the positive at index 0 (the positive term is
// part of the denominator). Returns both the scalar loss and the raw positive
// logits, which the attention-map extraction differentiates.

#include "camfit/autodiff.hpp"
#include "camfit/queue.hpp"

namespace camfit {

template <typename T>
struct ContrastiveResult {
    Var<T> loss;        // scalar, batch mean
    Var<T> pos_logits;  // [N], raw z . z_pos per sample
};

// z: [N,D] query embeddings (on tape); z_pos: [N,D] key embeddings (normally
// a detached leaf); negatives come from the queue snapshot.
template <typename T>
ContrastiveResult<T> contrastive_loss(Var<T> z, Var<T> z_pos, const EmbeddingQueue<T>& queue,
                                      T temperature) {
    CAMFIT_CHECK(!queue.empty(), StateError, "contrastive_loss: empty queue");
    CAMFIT_CHECK(temperature > T(0), ArgumentError,
                 "contrastive_loss: temperature must be positive");
    CAMFIT_CHECK(z.shape().size() == 2 && same_shape(z.value(), z_pos.value()), ArgumentError,
                 "contrastive_loss: z and z_pos must both be [N,D]");
    CAMFIT_CHECK(z.shape()[1] == queue.dim(), ArgumentError,
                 "contrastive_loss: embedding dim does not match queue dim");
    Var<T> pos = ops::rows_dot(z, z_pos);
    Var<T> neg = ops::bank_logits(z, queue.snapshot());
    Var<T> loss = ops::info_nce(pos, neg, temperature);
    return {loss, pos};
}

}  // namespace camfit
