#include "demgan/nn/tensor.hpp"

#include <algorithm>

#include "demgan/error.hpp"

namespace demgan::nn {

std::string Tensor::shape_string() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw Error(ErrorKind::alignment, "cannot concatenate " + a.shape_string() + " and " + b.shape_string());
    }
    Tensor out(a.n, a.c + b.c, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        auto dst = out.sample(i);
        const auto sa = a.sample(i);
        const auto sb = b.sample(i);
        std::copy(sa.begin(), sa.end(), dst.begin());
        std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
    }
    return out;
}

void split_channels(const Tensor& joined, int channels_a, Tensor& a, Tensor& b) {
    a = Tensor(joined.n, channels_a, joined.h, joined.w);
    b = Tensor(joined.n, joined.c - channels_a, joined.h, joined.w);
    for (int i = 0; i < joined.n; ++i) {
        const auto src = joined.sample(i);
        auto da = a.sample(i);
        auto db = b.sample(i);
        std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(da.size()), da.begin());
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(da.size()), src.end(), db.begin());
    }
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

}  // namespace demgan::nn
