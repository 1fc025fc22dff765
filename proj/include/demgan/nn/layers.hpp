#pragma once

#include <cstdint>
#include <vector>

#include "demgan/nn/tensor.hpp"
#include "demgan/rng.hpp"

namespace demgan::nn {

/// Each layer caches what its backward pass needs during forward; backward
/// accumulates parameter gradients and returns the gradient of its input.

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, std::string name);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);
    void init_normal(Rng& rng, double stddev);
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }

    int in_channels() const noexcept { return in_; }
    int out_channels() const noexcept { return out_; }

private:
    int in_ = 0;
    int out_ = 0;
    int k_ = 0;
    int stride_ = 1;
    int pad_ = 0;
    Parameter weight_;  // [out][in][k][k]
    Parameter bias_;
    int in_h_ = 0;
    int in_w_ = 0;
    int out_h_ = 0;
    int out_w_ = 0;
    int batch_ = 0;
    Buffer cols_;  // per-sample im2col buffers
};

/// Fractionally strided convolution; weight layout [in][out][k][k].
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride, int padding, std::string name);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);
    void init_normal(Rng& rng, double stddev);
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }

private:
    int in_ = 0;
    int out_ = 0;
    int k_ = 0;
    int stride_ = 1;
    int pad_ = 0;
    Parameter weight_;
    Parameter bias_;
    Tensor input_;
};

/// Per-sample, per-channel normalization with a learned scale and shift.
class InstanceNorm {
public:
    InstanceNorm() = default;
    InstanceNorm(int channels, std::string name, double eps = 1e-5);

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);
    std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }

private:
    int channels_ = 0;
    double eps_ = 1e-5;
    Parameter gamma_;
    Parameter beta_;
    Tensor xhat_;
    std::vector<double> inv_std_;
};

/// slope = 0 gives a plain ReLU.
class LeakyRelu {
public:
    explicit LeakyRelu(double slope = 0.2) : slope_(slope) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    double slope_;
    Tensor input_;
};

class Tanh {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& grad_out);

private:
    Tensor output_;
};

/// Inverted dropout; identity when rng is null.
class Dropout {
public:
    explicit Dropout(double rate = 0.5) : rate_(rate) {}
    Tensor forward(const Tensor& x, Rng* rng);
    Tensor backward(const Tensor& grad_out);
    double rate() const noexcept { return rate_; }

private:
    double rate_;
    std::vector<double> scale_;
};

/// Adaptive-moment gradient descent over a fixed parameter list.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Parameter*> params, double learning_rate, double beta1 = 0.5, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    void set_learning_rate(double lr) noexcept { lr_ = lr; }
    double learning_rate() const noexcept { return lr_; }
    std::int64_t steps() const noexcept { return t_; }
    void set_steps(std::int64_t t) noexcept { t_ = t; }

private:
    std::vector<Parameter*> params_;
    double lr_ = 2e-4;
    double beta1_ = 0.5;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    std::int64_t t_ = 0;
};

}  // namespace demgan::nn
