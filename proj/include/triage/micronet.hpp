#pragma once

// A small deterministic differentiable network: a linear stack of conv2d, relu,
// maxpool2d, global_avg_pool, dense and sigmoid layers, one sample at a time.
//
// Storage is whatever scalar the tensors use (float for training, double for
// gradient checking); every reduction accumulates in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triage/error.hpp"
#include "triage/rng.hpp"
#include "triage/tensor.hpp"

namespace triage::micronet {

/// Probabilities are clamped to [kBceEpsilon, 1 - kBceEpsilon] inside the loss.
inline constexpr double kBceEpsilon = 1e-7;
/// Floor of the denominator in the gradient-check relative error.
inline constexpr double kGradCheckDelta = 1e-8;

enum class LayerKind { Conv2d, Relu, MaxPool2d, GlobalAvgPool, Dense, Sigmoid };
enum class Padding { Valid, Same };

inline std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool2d: return "maxpool2d";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
        case LayerKind::Dense: return "dense";
        case LayerKind::Sigmoid: return "sigmoid";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& name) {
    for (auto k : {LayerKind::Conv2d, LayerKind::Relu, LayerKind::MaxPool2d, LayerKind::GlobalAvgPool,
                   LayerKind::Dense, LayerKind::Sigmoid})
        if (to_string(k) == name) return k;
    fail(ErrorCode::Schema, "unknown layer kind '" + name + "'");
}

inline std::string to_string(Padding p) { return p == Padding::Valid ? "valid" : "same"; }

inline Padding padding_from_string(const std::string& name) {
    if (name == "valid") return Padding::Valid;
    if (name == "same") return Padding::Same;
    fail(ErrorCode::Schema, "unknown padding mode '" + name + "' (expected valid or same)");
}

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    // conv2d
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    // conv2d and maxpool2d
    std::size_t kernel = 0;
    std::size_t stride = 0;
    Padding padding = Padding::Valid;
    // dense (input is flattened)
    std::size_t in_units = 0;
    std::size_t out_units = 0;

    static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            Padding padding) {
        LayerSpec s;
        s.kind = LayerKind::Conv2d;
        s.in_channels = in;
        s.out_channels = out;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride, Padding padding) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool2d;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec dense(std::size_t in, std::size_t out) {
        LayerSpec s;
        s.kind = LayerKind::Dense;
        s.in_units = in;
        s.out_units = out;
        return s;
    }
    static LayerSpec relu() { return LayerSpec{}; }
    static LayerSpec global_avg_pool() {
        LayerSpec s;
        s.kind = LayerKind::GlobalAvgPool;
        return s;
    }
    static LayerSpec sigmoid() {
        LayerSpec s;
        s.kind = LayerKind::Sigmoid;
        return s;
    }

    bool has_params() const { return kind == LayerKind::Conv2d || kind == LayerKind::Dense; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
    std::size_t input_channels = 1;
    std::vector<LayerSpec> layers;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline std::string layer_label(const NetworkSpec& spec, std::size_t index) {
    return "layer " + std::to_string(index) + " (" + to_string(spec.layers[index].kind) + ")";
}

inline std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
inline std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

// Output extent and leading pad along one spatial axis.
struct Window {
    std::size_t out = 0;
    std::size_t pad_before = 0;
};

inline std::optional<Window> window_for(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
    if (padding == Padding::Valid) {
        if (in < kernel) return std::nullopt;
        return Window{(in - kernel) / stride + 1, 0};
    }
    const std::size_t out = (in + stride - 1) / stride;
    const std::size_t needed = (out - 1) * stride + kernel;
    const std::size_t total = needed > in ? needed - in : 0;
    // Odd padding puts the extra pixel on the bottom/right.
    return Window{out, total / 2};
}

/// Validates layer hyperparameters and channel/unit chaining. Throws on the first problem.
inline void validate(const NetworkSpec& spec) {
    require(spec.input_channels > 0, ErrorCode::InvalidArgument, "network input_channels must be positive");
    require(!spec.layers.empty(), ErrorCode::InvalidArgument, "network has no layers");
    bool spatial = true;
    std::size_t channels = spec.input_channels;
    std::optional<std::size_t> units;  // known flattened size once non-spatial
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto where = layer_label(spec, i);
        switch (l.kind) {
            case LayerKind::Conv2d:
                require(spatial, ErrorCode::InvalidArgument, where + " needs a spatial input");
                require(l.kernel >= 1 && l.stride >= 1, ErrorCode::InvalidArgument,
                        where + " needs kernel >= 1 and stride >= 1");
                require(l.in_channels == channels, ErrorCode::ShapeMismatch,
                        where + " expects " + std::to_string(l.in_channels) + " input channels, previous layer gives " +
                            std::to_string(channels));
                require(l.out_channels >= 1, ErrorCode::InvalidArgument, where + " needs out_channels >= 1");
                channels = l.out_channels;
                break;
            case LayerKind::MaxPool2d:
                require(spatial, ErrorCode::InvalidArgument, where + " needs a spatial input");
                require(l.kernel >= 1 && l.stride >= 1, ErrorCode::InvalidArgument,
                        where + " needs kernel >= 1 and stride >= 1");
                break;
            case LayerKind::GlobalAvgPool:
                require(spatial, ErrorCode::InvalidArgument, where + " needs a spatial input");
                spatial = false;
                units = channels;
                break;
            case LayerKind::Dense:
                require(l.in_units >= 1 && l.out_units >= 1, ErrorCode::InvalidArgument,
                        where + " needs positive in/out sizes");
                if (units)
                    require(*units == l.in_units, ErrorCode::ShapeMismatch,
                            where + " expects " + std::to_string(l.in_units) + " inputs, previous layer gives " +
                                std::to_string(*units));
                spatial = false;
                units = l.out_units;
                break;
            case LayerKind::Relu:
            case LayerKind::Sigmoid:
                break;
        }
    }
}

/// True when the network ends in dense(->1) followed by sigmoid.
inline bool is_classifier(const NetworkSpec& spec) {
    const auto n = spec.layers.size();
    return n >= 2 && spec.layers[n - 1].kind == LayerKind::Sigmoid && spec.layers[n - 2].kind == LayerKind::Dense &&
           spec.layers[n - 2].out_units == 1;
}

/// Product of conv/pool strides before global pooling.
inline std::size_t downsampling_factor(const NetworkSpec& spec) {
    std::size_t d = 1;
    for (const auto& l : spec.layers) {
        if (l.kind == LayerKind::GlobalAvgPool) break;
        if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::MaxPool2d) d *= l.stride;
    }
    return d;
}

/// Shapes of every activation (input first) for a (C, H, W) input, or nullopt if the input is too small.
inline std::optional<std::vector<Shape>> activation_shapes(const NetworkSpec& spec, std::size_t height,
                                                           std::size_t width) {
    std::vector<Shape> shapes{{spec.input_channels, height, width}};
    Shape cur = shapes.front();
    for (const auto& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv2d:
            case LayerKind::MaxPool2d: {
                if (cur.size() != 3) return std::nullopt;
                auto wy = window_for(cur[1], l.kernel, l.stride, l.padding);
                auto wx = window_for(cur[2], l.kernel, l.stride, l.padding);
                if (!wy || !wx) return std::nullopt;
                cur = {l.kind == LayerKind::Conv2d ? l.out_channels : cur[0], wy->out, wx->out};
                break;
            }
            case LayerKind::GlobalAvgPool: cur = {cur[0]}; break;
            case LayerKind::Dense:
                if (shape_size(cur) != l.in_units) return std::nullopt;
                cur = {l.out_units};
                break;
            default: break;
        }
        shapes.push_back(cur);
    }
    return shapes;
}

/// Smallest square input the network accepts.
inline std::size_t min_input_size(const NetworkSpec& spec) {
    for (std::size_t s = 1; s <= 4096; ++s)
        if (activation_shapes(spec, s, s)) return s;
    fail(ErrorCode::InvalidArgument, "network accepts no square input up to 4096");
}

template <typename T>
using BasicParameters = std::map<std::string, BasicTensor<T>>;
using Parameters = BasicParameters<float>;

template <typename U, typename T>
BasicParameters<U> cast_parameters(const BasicParameters<T>& params) {
    BasicParameters<U> out;
    for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
    return out;
}

/// Glorot-uniform weights from a stream keyed by (seed, layer index); zero biases.
inline Parameters init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
    validate(spec);
    Parameters params;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        if (!l.has_params()) continue;
        Shape wshape;
        double fan_in = 0, fan_out = 0;
        std::size_t nbias = 0;
        if (l.kind == LayerKind::Conv2d) {
            wshape = {l.out_channels, l.in_channels, l.kernel, l.kernel};
            fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
            fan_out = static_cast<double>(l.out_channels * l.kernel * l.kernel);
            nbias = l.out_channels;
        } else {
            wshape = {l.out_units, l.in_units};
            fan_in = static_cast<double>(l.in_units);
            fan_out = static_cast<double>(l.out_units);
            nbias = l.out_units;
        }
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        CounterRng rng(derive_seed(seed, "micronet.init", {i}));
        Tensor w(wshape);
        for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-limit, limit));
        params.emplace(weight_name(i), std::move(w));
        params.emplace(bias_name(i), Tensor({nbias}));
    }
    return params;
}

namespace detail {

// Output positions o in [lo, hi) whose source index o*stride + offset is inside [0, n).
inline std::pair<std::size_t, std::size_t> in_bounds(std::size_t out_n, std::size_t in_n, std::size_t stride,
                                                     long offset) {
    const long s = static_cast<long>(stride);
    long lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
    const long last = static_cast<long>(in_n) - 1 - offset;
    long hi = last < 0 ? 0 : last / s + 1;
    hi = std::min<long>(hi, static_cast<long>(out_n));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
const BasicTensor<T>& param(const BasicParameters<T>& params, const std::string& name, const Shape& expected,
                            const std::string& where) {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::ShapeMismatch, where + " is missing parameter " + name);
    require(it->second.shape() == expected, ErrorCode::ShapeMismatch,
            where + " parameter " + name + " has shape " + shape_string(it->second.shape()) + ", expected " +
                shape_string(expected));
    return it->second;
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& in, const BasicTensor<T>& w, const BasicTensor<T>& b,
                              const LayerSpec& l, const Window& wy, const Window& wx) {
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const std::size_t OC = l.out_channels, K = l.kernel, S = l.stride;
    const std::size_t OH = wy.out, OW = wx.out;
    BasicTensor<T> out({OC, OH, OW});
    std::vector<double> acc(OH * OW);
    for (std::size_t oc = 0; oc < OC; ++oc) {
        std::fill(acc.begin(), acc.end(), static_cast<double>(b[oc]));
        for (std::size_t ic = 0; ic < C; ++ic) {
            for (std::size_t ky = 0; ky < K; ++ky) {
                const long offy = static_cast<long>(ky) - static_cast<long>(wy.pad_before);
                const auto [ylo, yhi] = in_bounds(OH, H, S, offy);
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const long offx = static_cast<long>(kx) - static_cast<long>(wx.pad_before);
                    const auto [xlo, xhi] = in_bounds(OW, W, S, offx);
                    const double wv = w[((oc * C + ic) * K + ky) * K + kx];
                    for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        const T* row = &in.at(ic, static_cast<std::size_t>(static_cast<long>(oy * S) + offy), 0);
                        double* arow = &acc[oy * OW];
                        if (S == 1) {
                            const T* src = row + (static_cast<long>(xlo) + offx);
                            double* dst = arow + xlo;
                            for (std::size_t k = 0; k < xhi - xlo; ++k) dst[k] += wv * static_cast<double>(src[k]);
                        } else {
                            for (std::size_t ox = xlo; ox < xhi; ++ox)
                                arow[ox] += wv * static_cast<double>(row[static_cast<long>(ox * S) + offx]);
                        }
                    }
                }
            }
        }
        T* dst = &out.at(oc, 0, 0);
        for (std::size_t i = 0; i < OH * OW; ++i) dst[i] = static_cast<T>(acc[i]);
    }
    return out;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& in, const BasicTensor<T>& w, const BasicTensor<T>& grad_out,
                     const LayerSpec& l, const Window& wy, const Window& wx, std::vector<double>& dw,
                     std::vector<double>& db, std::vector<double>* dx) {
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const std::size_t OC = l.out_channels, K = l.kernel, S = l.stride;
    const std::size_t OH = wy.out, OW = wx.out;
    for (std::size_t oc = 0; oc < OC; ++oc) {
        const T* g = &grad_out.at(oc, 0, 0);
        double gsum = 0;
        for (std::size_t i = 0; i < OH * OW; ++i) gsum += static_cast<double>(g[i]);
        db[oc] += gsum;
        for (std::size_t ic = 0; ic < C; ++ic) {
            for (std::size_t ky = 0; ky < K; ++ky) {
                const long offy = static_cast<long>(ky) - static_cast<long>(wy.pad_before);
                const auto [ylo, yhi] = in_bounds(OH, H, S, offy);
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const long offx = static_cast<long>(kx) - static_cast<long>(wx.pad_before);
                    const auto [xlo, xhi] = in_bounds(OW, W, S, offx);
                    const std::size_t widx = ((oc * C + ic) * K + ky) * K + kx;
                    const double wv = w[widx];
                    double acc = 0;
                    for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        const std::size_t iy = static_cast<std::size_t>(static_cast<long>(oy * S) + offy);
                        const T* row = &in.at(ic, iy, 0);
                        const T* grow = g + oy * OW;
                        if (S == 1) {
                            const std::size_t n = xhi - xlo;
                            const long first = static_cast<long>(xlo) + offx;
                            const T* src = row + first;
                            const T* gsrc = grow + xlo;
                            // Four fixed partial sums: deterministic and not latency bound.
                            double part[4] = {0, 0, 0, 0};
                            std::size_t k = 0;
                            for (; k + 4 <= n; k += 4)
                                for (std::size_t u = 0; u < 4; ++u)
                                    part[u] += static_cast<double>(gsrc[k + u]) * static_cast<double>(src[k + u]);
                            for (; k < n; ++k) part[0] += static_cast<double>(gsrc[k]) * static_cast<double>(src[k]);
                            acc += (part[0] + part[1]) + (part[2] + part[3]);
                            if (dx) {
                                double* dst = &(*dx)[(ic * H + iy) * W] + first;
                                for (std::size_t j = 0; j < n; ++j) dst[j] += wv * static_cast<double>(gsrc[j]);
                            }
                            continue;
                        }
                        double* dxrow = dx ? &(*dx)[(ic * H + iy) * W] : nullptr;
                        for (std::size_t ox = xlo; ox < xhi; ++ox) {
                            const long ix = static_cast<long>(ox * S) + offx;
                            const double gv = static_cast<double>(grow[ox]);
                            acc += gv * static_cast<double>(row[ix]);
                            if (dxrow) dxrow[ix] += wv * gv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

// Index (into the input) of the first row-major maximum of each pooling window.
template <typename T>
std::vector<std::size_t> maxpool_argmax(const BasicTensor<T>& in, const LayerSpec& l, const Window& wy,
                                        const Window& wx) {
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    std::vector<std::size_t> arg(C * wy.out * wx.out);
    std::size_t o = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < wy.out; ++oy)
            for (std::size_t ox = 0; ox < wx.out; ++ox) {
                std::size_t best = 0;
                bool found = false;
                T best_v{};
                for (std::size_t ky = 0; ky < l.kernel; ++ky) {
                    const long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(wy.pad_before);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                        const long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(wx.pad_before);
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        const std::size_t idx = (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                        if (!found || in[idx] > best_v) {
                            best = idx;
                            best_v = in[idx];
                            found = true;
                        }
                    }
                }
                arg[o++] = best;
            }
    return arg;
}

template <typename T>
T clamp_probability(double p) {
    T v = static_cast<T>(p);
    const T upper = std::nextafter(T{1}, T{0});
    const T lower = std::numeric_limits<T>::min();
    return std::clamp(v, lower, upper);
}

inline double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

/// Runs the network on one (C, H, W) input. Element 0 of the result is the input;
/// element i+1 is the output of layer i.
template <typename T>
std::vector<BasicTensor<T>> forward(const NetworkSpec& spec, const BasicParameters<T>& params,
                                    const BasicTensor<T>& input) {
    validate(spec);
    require(input.rank() == 3, ErrorCode::ShapeMismatch,
            "network input must be (C,H,W), got " + shape_string(input.shape()));
    require(input.dim(0) == spec.input_channels, ErrorCode::ShapeMismatch,
            "network expects " + std::to_string(spec.input_channels) + " input channels, got " +
                std::to_string(input.dim(0)));
    require(input.all_finite(), ErrorCode::NonFinite, "network input contains NaN or Inf");

    std::vector<BasicTensor<T>> acts;
    acts.reserve(spec.layers.size() + 1);
    acts.push_back(input);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto& x = acts.back();
        const auto where = layer_label(spec, i);
        switch (l.kind) {
            case LayerKind::Conv2d: {
                require(x.rank() == 3, ErrorCode::ShapeMismatch, where + " needs a (C,H,W) input");
                auto wy = window_for(x.dim(1), l.kernel, l.stride, l.padding);
                auto wx = window_for(x.dim(2), l.kernel, l.stride, l.padding);
                require(wy && wx, ErrorCode::ShapeMismatch,
                        where + " input " + shape_string(x.shape()) + " is smaller than kernel " +
                            std::to_string(l.kernel));
                const auto& w = detail::param(params, weight_name(i), {l.out_channels, l.in_channels, l.kernel, l.kernel}, where);
                const auto& b = detail::param(params, bias_name(i), {l.out_channels}, where);
                acts.push_back(detail::conv2d_forward(x, w, b, l, *wy, *wx));
                break;
            }
            case LayerKind::MaxPool2d: {
                require(x.rank() == 3, ErrorCode::ShapeMismatch, where + " needs a (C,H,W) input");
                auto wy = window_for(x.dim(1), l.kernel, l.stride, l.padding);
                auto wx = window_for(x.dim(2), l.kernel, l.stride, l.padding);
                require(wy && wx, ErrorCode::ShapeMismatch,
                        where + " input " + shape_string(x.shape()) + " is smaller than kernel " +
                            std::to_string(l.kernel));
                const auto arg = detail::maxpool_argmax(x, l, *wy, *wx);
                BasicTensor<T> y({x.dim(0), wy->out, wx->out});
                for (std::size_t j = 0; j < arg.size(); ++j) y[j] = x[arg[j]];
                acts.push_back(std::move(y));
                break;
            }
            case LayerKind::Relu: {
                BasicTensor<T> y(x.shape());
                for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] > T{0} ? x[j] : T{0};
                acts.push_back(std::move(y));
                break;
            }
            case LayerKind::GlobalAvgPool: {
                require(x.rank() == 3, ErrorCode::ShapeMismatch, where + " needs a (C,H,W) input");
                const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
                BasicTensor<T> y({C});
                for (std::size_t c = 0; c < C; ++c) {
                    double s = 0;
                    const T* p = &x.at(c, 0, 0);
                    for (std::size_t j = 0; j < HW; ++j) s += static_cast<double>(p[j]);
                    y[c] = static_cast<T>(s / static_cast<double>(HW));
                }
                acts.push_back(std::move(y));
                break;
            }
            case LayerKind::Dense: {
                require(x.size() == l.in_units, ErrorCode::ShapeMismatch,
                        where + " expects " + std::to_string(l.in_units) + " inputs, got " + shape_string(x.shape()));
                const auto& w = detail::param(params, weight_name(i), {l.out_units, l.in_units}, where);
                const auto& b = detail::param(params, bias_name(i), {l.out_units}, where);
                BasicTensor<T> y({l.out_units});
                for (std::size_t o = 0; o < l.out_units; ++o) {
                    double s = static_cast<double>(b[o]);
                    for (std::size_t j = 0; j < l.in_units; ++j)
                        s += static_cast<double>(w[o * l.in_units + j]) * static_cast<double>(x[j]);
                    y[o] = static_cast<T>(s);
                }
                acts.push_back(std::move(y));
                break;
            }
            case LayerKind::Sigmoid: {
                BasicTensor<T> y(x.shape());
                for (std::size_t j = 0; j < x.size(); ++j)
                    y[j] = detail::clamp_probability<T>(detail::sigmoid(static_cast<double>(x[j])));
                acts.push_back(std::move(y));
                break;
            }
        }
        require(acts.back().all_finite(), ErrorCode::NonFinite, where + " produced a non-finite activation");
    }
    return acts;
}

/// Final scalar output of a classifier network.
template <typename T>
double predict(const NetworkSpec& spec, const BasicParameters<T>& params, const BasicTensor<T>& input) {
    require(is_classifier(spec), ErrorCode::InvalidArgument, "predict needs a dense(->1)+sigmoid classifier");
    return static_cast<double>(forward(spec, params, input).back()[0]);
}

/// Binary cross-entropy with the prediction clamped to [eps, 1-eps].
inline double loss_bce(double pred, int label) {
    require(label == 0 || label == 1, ErrorCode::InvalidArgument, "BCE label must be 0 or 1");
    const double p = std::clamp(pred, kBceEpsilon, 1.0 - kBceEpsilon);
    return label == 1 ? -std::log(p) : -std::log1p(-p);
}

namespace detail {

// Adds d(loss)/d(param) for one sample into `grads` (double accumulators keyed like params).
template <typename T>
double accumulate_gradient(const NetworkSpec& spec, const BasicParameters<T>& params, const BasicTensor<T>& input,
                           int label, std::map<std::string, std::vector<double>>& grads) {
    require(is_classifier(spec), ErrorCode::InvalidArgument, "backward needs a dense(->1)+sigmoid classifier");
    const auto acts = forward(spec, params, input);
    const double p = static_cast<double>(acts.back()[0]);
    const double loss = loss_bce(p, label);

    // Fused sigmoid + BCE: dL/dz = p - y inside the clamp, 0 where the clamp is active.
    const bool clamped = p < kBceEpsilon || p > 1.0 - kBceEpsilon;
    std::vector<double> g{clamped ? 0.0 : p - static_cast<double>(label)};
    const std::size_t last = spec.layers.size() - 1;

    for (std::size_t ii = last; ii-- > 0;) {
        const auto& l = spec.layers[ii];
        const auto& x = acts[ii];
        const auto& y = acts[ii + 1];
        const bool need_dx = ii > 0;
        std::vector<double> dx;
        switch (l.kind) {
            case LayerKind::Dense: {
                const auto& w = params.at(weight_name(ii));
                auto& dw = grads[weight_name(ii)];
                auto& db = grads[bias_name(ii)];
                dw.resize(w.size(), 0.0);
                db.resize(l.out_units, 0.0);
                if (need_dx) dx.assign(l.in_units, 0.0);
                for (std::size_t o = 0; o < l.out_units; ++o) {
                    db[o] += g[o];
                    for (std::size_t j = 0; j < l.in_units; ++j) {
                        dw[o * l.in_units + j] += g[o] * static_cast<double>(x[j]);
                        if (need_dx) dx[j] += static_cast<double>(w[o * l.in_units + j]) * g[o];
                    }
                }
                break;
            }
            case LayerKind::Conv2d: {
                const auto& w = params.at(weight_name(ii));
                auto& dw = grads[weight_name(ii)];
                auto& db = grads[bias_name(ii)];
                dw.resize(w.size(), 0.0);
                db.resize(l.out_channels, 0.0);
                const auto wy = *window_for(x.dim(1), l.kernel, l.stride, l.padding);
                const auto wx = *window_for(x.dim(2), l.kernel, l.stride, l.padding);
                BasicTensor<T> gout(y.shape());
                for (std::size_t j = 0; j < g.size(); ++j) gout[j] = static_cast<T>(g[j]);
                if (need_dx) dx.assign(x.size(), 0.0);
                conv2d_backward(x, w, gout, l, wy, wx, dw, db, need_dx ? &dx : nullptr);
                break;
            }
            case LayerKind::MaxPool2d: {
                if (!need_dx) break;
                const auto wy = *window_for(x.dim(1), l.kernel, l.stride, l.padding);
                const auto wx = *window_for(x.dim(2), l.kernel, l.stride, l.padding);
                const auto arg = maxpool_argmax(x, l, wy, wx);
                dx.assign(x.size(), 0.0);
                for (std::size_t j = 0; j < arg.size(); ++j) dx[arg[j]] += g[j];
                break;
            }
            case LayerKind::Relu: {
                if (!need_dx) break;
                dx.resize(x.size());
                for (std::size_t j = 0; j < x.size(); ++j) dx[j] = x[j] > T{0} ? g[j] : 0.0;
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (!need_dx) break;
                const std::size_t HW = x.dim(1) * x.dim(2);
                dx.resize(x.size());
                for (std::size_t c = 0; c < x.dim(0); ++c)
                    for (std::size_t j = 0; j < HW; ++j) dx[c * HW + j] = g[c] / static_cast<double>(HW);
                break;
            }
            case LayerKind::Sigmoid: {
                if (!need_dx) break;
                dx.resize(x.size());
                for (std::size_t j = 0; j < x.size(); ++j) {
                    const double s = static_cast<double>(y[j]);
                    dx[j] = g[j] * s * (1.0 - s);
                }
                break;
            }
        }
        g = std::move(dx);
    }
    return loss;
}

template <typename T>
BasicParameters<T> finalize_gradient(const BasicParameters<T>& params,
                                     std::map<std::string, std::vector<double>>& acc, double scale) {
    BasicParameters<T> out;
    for (const auto& [name, p] : params) {
        BasicTensor<T> t(p.shape());
        auto it = acc.find(name);
        if (it != acc.end())
            for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<T>(it->second[j] * scale);
        out.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace detail

/// Gradient of the BCE loss for one labeled input.
template <typename T>
BasicParameters<T> backward(const NetworkSpec& spec, const BasicParameters<T>& params, const BasicTensor<T>& input,
                            int label) {
    std::map<std::string, std::vector<double>> acc;
    detail::accumulate_gradient(spec, params, input, label, acc);
    return detail::finalize_gradient(params, acc, 1.0);
}

template <typename T>
struct BatchGradient {
    double mean_loss = 0;
    BasicParameters<T> grads;
};

/// Mean loss and mean gradient over a batch.
template <typename T>
BatchGradient<T> batch_gradient(const NetworkSpec& spec, const BasicParameters<T>& params,
                                std::span<const BasicTensor<T>* const> inputs, std::span<const int> labels) {
    require(!inputs.empty() && inputs.size() == labels.size(), ErrorCode::InvalidArgument,
            "batch needs matching non-empty inputs and labels");
    std::map<std::string, std::vector<double>> acc;
    double loss = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        loss += detail::accumulate_gradient(spec, params, *inputs[i], labels[i], acc);
    const double n = static_cast<double>(inputs.size());
    return {loss / n, detail::finalize_gradient(params, acc, 1.0 / n)};
}

inline void check_same_layout(const Parameters& a, const Parameters& b, const char* what) {
    require(a.size() == b.size(), ErrorCode::ShapeMismatch, std::string(what) + ": parameter sets differ in size");
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        require(it != b.end(), ErrorCode::ShapeMismatch, std::string(what) + ": missing " + name);
        require(it->second.shape() == t.shape(), ErrorCode::ShapeMismatch,
                std::string(what) + ": " + name + " shape " + shape_string(t.shape()) + " vs " +
                    shape_string(it->second.shape()));
    }
}

/// theta' = theta - lr * g.
inline Parameters sgd_step(const Parameters& params, const Parameters& grads, double learning_rate) {
    require(learning_rate > 0, ErrorCode::InvalidArgument, "learning rate must be positive");
    check_same_layout(params, grads, "sgd_step");
    Parameters out = params;
    for (auto& [name, t] : out) {
        const auto& g = grads.at(name);
        for (std::size_t j = 0; j < t.size(); ++j)
            t[j] = static_cast<float>(static_cast<double>(t[j]) - learning_rate * static_cast<double>(g[j]));
    }
    return out;
}

/// SGD with heavy-ball momentum: v = mu*v + g; theta -= lr*v. momentum == 0 is plain SGD.
class SgdOptimizer {
public:
    explicit SgdOptimizer(double momentum = 0.9) : momentum_(momentum) {
        require(momentum >= 0 && momentum < 1, ErrorCode::InvalidArgument, "momentum must be in [0, 1)");
    }

    // `frozen` parameters are left untouched (their velocity stays zero).
    void step(Parameters& params, const Parameters& grads, double learning_rate,
              const std::vector<std::string>& frozen = {}) {
        require(learning_rate >= 0, ErrorCode::InvalidArgument, "learning rate must be non-negative");
        check_same_layout(params, grads, "SgdOptimizer::step");
        for (auto& [name, t] : params) {
            if (std::find(frozen.begin(), frozen.end(), name) != frozen.end()) continue;
            const auto& g = grads.at(name);
            auto& v = velocity_[name];
            v.resize(t.size(), 0.0f);
            for (std::size_t j = 0; j < t.size(); ++j) {
                v[j] = static_cast<float>(momentum_ * static_cast<double>(v[j]) + static_cast<double>(g[j]));
                t[j] = static_cast<float>(static_cast<double>(t[j]) - learning_rate * static_cast<double>(v[j]));
            }
        }
    }

private:
    double momentum_;
    std::map<std::string, std::vector<float>> velocity_;
};

struct GradCheckResult {
    double max_relative_error = 0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    // Parameters whose difference step had to shrink to stay off a relu/maxpool kink.
    std::size_t reduced_steps = 0;
};

/// Sign of every relu input and the argmax of every pooling window, in layer order.
/// Two points with the same pattern lie in the same smooth piece of the network.
template <typename T>
std::vector<std::size_t> activation_pattern(const NetworkSpec& spec, const BasicParameters<T>& params,
                                            const BasicTensor<T>& input) {
    const auto acts = forward(spec, params, input);
    std::vector<std::size_t> pattern;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto& x = acts[i];
        if (l.kind == LayerKind::Relu) {
            for (std::size_t j = 0; j < x.size(); ++j) pattern.push_back(x[j] > T{0});
        } else if (l.kind == LayerKind::MaxPool2d) {
            const auto wy = *window_for(x.dim(1), l.kernel, l.stride, l.padding);
            const auto wx = *window_for(x.dim(2), l.kernel, l.stride, l.padding);
            const auto arg = detail::maxpool_argmax(x, l, wy, wx);
            pattern.insert(pattern.end(), arg.begin(), arg.end());
        }
    }
    return pattern;
}

/// Compares `analytic` against central differences of the double-precision loss.
/// When a +/-step probe changes the activation pattern the step is divided by 10
/// (up to three times) so the difference is taken within one smooth piece.
inline GradCheckResult grad_check_against(const NetworkSpec& spec, const BasicParameters<double>& params,
                                          const BasicTensor<double>& input, int label,
                                          const BasicParameters<double>& analytic, double step) {
    require(step > 0, ErrorCode::InvalidArgument, "finite-difference step must be positive");
    GradCheckResult result;
    auto probe = params;
    const auto base_pattern = activation_pattern(spec, params, input);
    for (auto& [name, t] : probe) {
        const auto& a = analytic.at(name);
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double orig = t[j];
            double h = step;
            double numeric = 0;
            for (int attempt = 0;; ++attempt) {
                t[j] = orig + h;
                const double up = loss_bce(predict(spec, probe, input), label);
                const bool up_same = activation_pattern(spec, probe, input) == base_pattern;
                t[j] = orig - h;
                const double down = loss_bce(predict(spec, probe, input), label);
                const bool down_same = activation_pattern(spec, probe, input) == base_pattern;
                t[j] = orig;
                numeric = (up - down) / (2 * h);
                if ((up_same && down_same) || attempt == 3) break;
                if (attempt == 0) ++result.reduced_steps;
                h /= 10;
            }
            const double denom = std::max({std::abs(a[j]), std::abs(numeric), kGradCheckDelta});
            const double err = std::abs(a[j] - numeric) / denom;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_parameter = name;
                result.worst_index = j;
            }
        }
    }
    return result;
}

/// Max relative error between backward() and central finite differences, all in double.
template <typename T>
GradCheckResult grad_check(const NetworkSpec& spec, const BasicParameters<T>& params, const BasicTensor<T>& input,
                           int label, double step = 1e-3) {
    const auto p64 = cast_parameters<double>(params);
    const auto x64 = input.template cast<double>();
    return grad_check_against(spec, p64, x64, label, backward(spec, p64, x64, label), step);
}

}  // namespace triage::micronet
