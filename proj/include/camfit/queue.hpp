#pragma once

// FIFO ring buffer of unit-norm embeddings: the negatives bank. Oldest
// entries are evicted first; snapshot() lays entries out oldest -> newest.

#include <cstdint>
#include <vector>

#include "camfit/rng.hpp"
#include "camfit/tensor.hpp"

namespace camfit {

template <typename T>
class EmbeddingQueue {
  public:
    EmbeddingQueue(int64_t capacity, int64_t dim) : capacity_(capacity), dim_(dim) {
        CAMFIT_CHECK(capacity > 0 && dim > 0, ArgumentError,
                     "queue: capacity and dim must be positive");
        data_.assign(size_t(capacity * dim), T(0));
    }

    int64_t capacity() const { return capacity_; }
    int64_t dim() const { return dim_; }
    int64_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    // Index the next push writes to; checkpointed so resume is exact.
    int64_t cursor() const { return (head_ + size_) % capacity_; }

    // Append a batch of embeddings [B, D]; evicts oldest entries past capacity.
    void push(const Tensor<T>& keys) {
        CAMFIT_CHECK(keys.ndim() == 2 && keys.dim(1) == dim_, ArgumentError,
                     "queue push: expected [B," + std::to_string(dim_) + "], got " +
                         shape_str(keys.shape()));
        const int64_t b = keys.dim(0);
        CAMFIT_CHECK(b <= capacity_, ArgumentError,
                     "queue push: batch " + std::to_string(b) + " exceeds capacity " +
                         std::to_string(capacity_));
        for (int64_t i = 0; i < b; ++i) {
            const int64_t slot = (head_ + size_) % capacity_;
            std::copy(keys.data() + i * dim_, keys.data() + (i + 1) * dim_,
                      data_.data() + slot * dim_);
            if (size_ < capacity_) ++size_;
            else head_ = (head_ + 1) % capacity_;  // overwrite oldest
        }
    }

    // Entries oldest -> newest as [size, D].
    Tensor<T> snapshot() const {
        Tensor<T> out({size_, dim_});
        for (int64_t i = 0; i < size_; ++i) {
            const int64_t slot = (head_ + i) % capacity_;
            std::copy(data_.data() + slot * dim_, data_.data() + (slot + 1) * dim_,
                      out.data() + i * dim_);
        }
        return out;
    }

    // Pre-fill with random unit vectors so step-0 logits are non-degenerate.
    void fill_random_unit(uint64_t seed) {
        Rng rng(seed);
        Tensor<T> batch({capacity_, dim_});
        for (int64_t i = 0; i < capacity_; ++i) {
            double norm2 = 0;
            std::vector<double> v(size_t(dim_), 0.0);
            for (auto& x : v) {
                x = rng.normal();
                norm2 += x * x;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (int64_t j = 0; j < dim_; ++j) batch.data()[i * dim_ + j] = T(v[size_t(j)] * inv);
        }
        head_ = 0;
        size_ = 0;
        push(batch);
    }

    // Raw state accessors for checkpointing.
    const std::vector<T>& raw() const { return data_; }
    void restore(std::vector<T> data, int64_t head, int64_t size) {
        CAMFIT_CHECK(int64_t(data.size()) == capacity_ * dim_, FormatError,
                     "queue restore: wrong payload size");
        CAMFIT_CHECK(head >= 0 && head < capacity_ && size >= 0 && size <= capacity_, FormatError,
                     "queue restore: invalid head/size");
        data_ = std::move(data);
        head_ = head;
        size_ = size;
    }
    int64_t head() const { return head_; }

  private:
    int64_t capacity_ = 0, dim_ = 0;
    std::vector<T> data_;  // ring storage [capacity, dim]
    int64_t head_ = 0;     // index of oldest entry
    int64_t size_ = 0;
};

}  // namespace camfit
