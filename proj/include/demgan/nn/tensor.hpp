#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace demgan::nn {

/// Cache-line aligned storage, so vectorized kernels see the same alignment
/// on every run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t count) { return static_cast<T*>(::operator new(count * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense NCHW tensor of doubles.
struct Tensor {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    Buffer data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * plane(); }
    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
    std::string shape_string() const;

    double& at(int in, int ic, int y, int x) {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
    }
    double at(int in, int ic, int y, int x) const {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
    }
    std::span<double> sample(int in) { return std::span<double>(data).subspan(in * sample_size(), sample_size()); }
    std::span<const double> sample(int in) const {
        return std::span<const double>(data).subspan(in * sample_size(), sample_size());
    }
};

/// Channel-wise concatenation of two tensors with equal N, H, W.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Inverse of concat_channels for gradients: first `channels_a` channels go to a.
void split_channels(const Tensor& joined, int channels_a, Tensor& a, Tensor& b);

/// A trainable array with its gradient and adaptive-moment state.
struct Parameter {
    std::string name;
    Buffer value;
    Buffer grad;
    Buffer m;
    Buffer v;

    Parameter() = default;
    Parameter(std::string name_, std::size_t count)
        : name(std::move(name_)), value(count, 0.0), grad(count, 0.0), m(count, 0.0), v(count, 0.0) {}

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad();
};

}  // namespace demgan::nn
