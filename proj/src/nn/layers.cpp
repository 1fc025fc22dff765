#include "demgan/nn/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "demgan/error.hpp"

namespace demgan::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Geometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
};

// Rows are (channel, ky, kx), columns are output positions.
void im2col(const double* x, const Geometry& g, double* col) {
    const int positions = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                double* row = col + (static_cast<std::size_t>(c * g.kernel + ky) * g.kernel + kx) * positions;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    double* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(dst, dst + g.out_w, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const Geometry& g, double* x) {
    const int positions = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                const double* row = col + (static_cast<std::size_t>(c * g.kernel + ky) * g.kernel + kx) * positions;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    const double* src = row + oy * g.out_w;
                    double* dst = x + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- Conv2d ------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, std::string name)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {}

void Conv2d::init_normal(Rng& rng, double stddev) {
    for (double& v : weight_.value) v = stddev * standard_normal(rng);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x) {
    if (x.c != in_) {
        throw Error(ErrorKind::alignment, weight_.name + ": expected " + std::to_string(in_) + " channels, got " +
                                              x.shape_string());
    }
    in_h_ = x.h;
    in_w_ = x.w;
    out_h_ = (x.h + 2 * pad_ - k_) / stride_ + 1;
    out_w_ = (x.w + 2 * pad_ - k_) / stride_ + 1;
    if (out_h_ < 1 || out_w_ < 1) throw Error(ErrorKind::argument, weight_.name + ": input " + x.shape_string() + " too small");
    batch_ = x.n;
    const Geometry g{in_, in_h_, in_w_, k_, stride_, pad_, out_h_, out_w_};
    const int rows = in_ * k_ * k_;
    const int positions = out_h_ * out_w_;
    cols_.resize(static_cast<std::size_t>(batch_) * rows * positions);

    Tensor y(x.n, out_, out_h_, out_w_);
    const ConstMapMat weight(weight_.value.data(), out_, rows);
    const Eigen::Map<const Eigen::VectorXd> bias(bias_.value.data(), out_);
    for (int i = 0; i < x.n; ++i) {
        double* col = cols_.data() + static_cast<std::size_t>(i) * rows * positions;
        im2col(x.sample(i).data(), g, col);
        MapMat out(y.sample(i).data(), out_, positions);
        out.noalias() = weight * ConstMapMat(col, rows, positions);
        out.colwise() += bias;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
    const Geometry g{in_, in_h_, in_w_, k_, stride_, pad_, out_h_, out_w_};
    const int rows = in_ * k_ * k_;
    const int positions = out_h_ * out_w_;
    Tensor dx(batch_, in_, in_h_, in_w_);
    const ConstMapMat weight(weight_.value.data(), out_, rows);
    MapMat dweight(weight_.grad.data(), out_, rows);
    Eigen::Map<Eigen::VectorXd> dbias(bias_.grad.data(), out_);
    RowMat dcol(rows, positions);
    for (int i = 0; i < batch_; ++i) {
        const ConstMapMat dy(grad_out.sample(i).data(), out_, positions);
        const ConstMapMat col(cols_.data() + static_cast<std::size_t>(i) * rows * positions, rows, positions);
        dweight.noalias() += dy * col.transpose();
        dbias += dy.rowwise().sum();
        dcol.noalias() = weight.transpose() * dy;
        col2im(dcol.data(), g, dx.sample(i).data());
    }
    return dx;
}

// ---- ConvTranspose2d -----------------------------------------------------------

ConvTranspose2d::ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride, int padding,
                                 std::string name)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding),
      weight_(name + ".weight", static_cast<std::size_t>(in_channels) * out_channels * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {}

void ConvTranspose2d::init_normal(Rng& rng, double stddev) {
    for (double& v : weight_.value) v = stddev * standard_normal(rng);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor ConvTranspose2d::forward(const Tensor& x) {
    if (x.c != in_) {
        throw Error(ErrorKind::alignment, weight_.name + ": expected " + std::to_string(in_) + " channels, got " +
                                              x.shape_string());
    }
    input_ = x;
    const int out_h = (x.h - 1) * stride_ - 2 * pad_ + k_;
    const int out_w = (x.w - 1) * stride_ - 2 * pad_ + k_;
    const Geometry g{out_, out_h, out_w, k_, stride_, pad_, x.h, x.w};
    const int rows = out_ * k_ * k_;
    const int positions = x.h * x.w;
    Tensor y(x.n, out_, out_h, out_w);
    const ConstMapMat weight(weight_.value.data(), in_, rows);
    RowMat col(rows, positions);
    for (int i = 0; i < x.n; ++i) {
        col.noalias() = weight.transpose() * ConstMapMat(x.sample(i).data(), in_, positions);
        double* dst = y.sample(i).data();
        col2im(col.data(), g, dst);
        for (int c = 0; c < out_; ++c) {
            double* plane = dst + static_cast<std::size_t>(c) * out_h * out_w;
            for (int p = 0; p < out_h * out_w; ++p) plane[p] += bias_.value[c];
        }
    }
    return y;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
    const Tensor& x = input_;
    const Geometry g{out_, grad_out.h, grad_out.w, k_, stride_, pad_, x.h, x.w};
    const int rows = out_ * k_ * k_;
    const int positions = x.h * x.w;
    Tensor dx(x.n, in_, x.h, x.w);
    const ConstMapMat weight(weight_.value.data(), in_, rows);
    MapMat dweight(weight_.grad.data(), in_, rows);
    RowMat dcol(rows, positions);
    for (int i = 0; i < x.n; ++i) {
        const double* dy = grad_out.sample(i).data();
        im2col(dy, g, dcol.data());
        const ConstMapMat xi(x.sample(i).data(), in_, positions);
        dweight.noalias() += xi * dcol.transpose();
        MapMat(dx.sample(i).data(), in_, positions).noalias() = weight * dcol;
        for (int c = 0; c < out_; ++c) {
            const double* plane = dy + static_cast<std::size_t>(c) * grad_out.plane();
            double s = 0.0;
            for (std::size_t p = 0; p < grad_out.plane(); ++p) s += plane[p];
            bias_.grad[c] += s;
        }
    }
    return dx;
}

// ---- InstanceNorm ----------------------------------------------------------------

InstanceNorm::InstanceNorm(int channels, std::string name, double eps)
    : channels_(channels),
      eps_(eps),
      gamma_(name + ".gamma", static_cast<std::size_t>(channels)),
      beta_(name + ".beta", static_cast<std::size_t>(channels)) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
}

Tensor InstanceNorm::forward(const Tensor& x) {
    if (x.c != channels_) throw Error(ErrorKind::alignment, gamma_.name + ": channel mismatch " + x.shape_string());
    xhat_ = Tensor(x.n, x.c, x.h, x.w);
    inv_std_.assign(static_cast<std::size_t>(x.n) * x.c, 0.0);
    Tensor y(x.n, x.c, x.h, x.w);
    const std::size_t plane = x.plane();
    for (int i = 0; i < x.n; ++i) {
        for (int c = 0; c < x.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(i) * x.c + c) * plane;
            double mean = 0.0;
            for (std::size_t p = 0; p < plane; ++p) mean += x.data[base + p];
            mean /= static_cast<double>(plane);
            double var = 0.0;
            for (std::size_t p = 0; p < plane; ++p) {
                const double d = x.data[base + p] - mean;
                var += d * d;
            }
            var /= static_cast<double>(plane);
            const double inv = 1.0 / std::sqrt(var + eps_);
            inv_std_[static_cast<std::size_t>(i) * x.c + c] = inv;
            for (std::size_t p = 0; p < plane; ++p) {
                const double xh = (x.data[base + p] - mean) * inv;
                xhat_.data[base + p] = xh;
                y.data[base + p] = gamma_.value[c] * xh + beta_.value[c];
            }
        }
    }
    return y;
}

Tensor InstanceNorm::backward(const Tensor& grad_out) {
    Tensor dx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
    const std::size_t plane = grad_out.plane();
    const double m = static_cast<double>(plane);
    for (int i = 0; i < grad_out.n; ++i) {
        for (int c = 0; c < grad_out.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(i) * grad_out.c + c) * plane;
            double sum_dy = 0.0;
            double sum_dy_xhat = 0.0;
            for (std::size_t p = 0; p < plane; ++p) {
                sum_dy += grad_out.data[base + p];
                sum_dy_xhat += grad_out.data[base + p] * xhat_.data[base + p];
            }
            gamma_.grad[c] += sum_dy_xhat;
            beta_.grad[c] += sum_dy;
            const double scale = gamma_.value[c] * inv_std_[static_cast<std::size_t>(i) * grad_out.c + c] / m;
            for (std::size_t p = 0; p < plane; ++p) {
                dx.data[base + p] =
                    scale * (m * grad_out.data[base + p] - sum_dy - xhat_.data[base + p] * sum_dy_xhat);
            }
        }
    }
    return dx;
}

// ---- activations ---------------------------------------------------------------

Tensor LeakyRelu::forward(const Tensor& x) {
    input_ = x;
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : slope_ * v;
    return y;
}

Tensor LeakyRelu::backward(const Tensor& grad_out) {
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
        if (!(input_.data[i] > 0.0)) dx.data[i] *= slope_;
    }
    return dx;
}

Tensor Tanh::forward(const Tensor& x) {
    output_ = x;
    for (double& v : output_.data) v = std::tanh(v);
    return output_;
}

Tensor Tanh::backward(const Tensor& grad_out) {
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= 1.0 - output_.data[i] * output_.data[i];
    return dx;
}

Tensor Dropout::forward(const Tensor& x, Rng* rng) {
    if (rng == nullptr || rate_ <= 0.0) {
        scale_.assign(x.size(), 1.0);
        return x;
    }
    const double keep = 1.0 - rate_;
    scale_.resize(x.size());
    Tensor y = x;
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        scale_[i] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
        y.data[i] *= scale_[i];
    }
    return y;
}

Tensor Dropout::backward(const Tensor& grad_out) {
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= scale_[i];
    return dx;
}

// ---- Adam ----------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::argument, "learning rate must be positive");
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params_) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i];
            p->m[i] = beta1_ * p->m[i] + (1.0 - beta1_) * g;
            p->v[i] = beta2_ * p->v[i] + (1.0 - beta2_) * g * g;
            const double m_hat = p->m[i] / c1;
            const double v_hat = p->v[i] / c2;
            p->value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

}  // namespace demgan::nn
