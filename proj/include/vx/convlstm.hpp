#pragma once

#include <array>
#include <vector>

#include "vx/ops.hpp"

// Convolutional LSTM: gate pre-activations are same-padded convolutions of
// the input frame and the previous hidden state (no peepholes).
//   i = sig(Wxi*x + Whi*h + bi)   f = sig(Wxf*x + Whf*h + bf)
//   o = sig(Wxo*x + Who*h + bo)   g = tanh(Wxg*x + Whg*h + bg)
//   c' = f.c + i.g                h' = o.tanh(c')

namespace vx {

// Gate order used throughout: i, f, o, g.
struct ConvLSTMParams {
    std::array<Tensor, 4> wx;    // (hidden, in, k, k)
    std::array<Tensor, 4> wh;    // (hidden, hidden, k, k)
    std::array<Tensor, 4> bias;  // (hidden)

    std::size_t hidden_channels() const { return wx[0].dims[0]; }
    std::size_t in_channels() const { return wx[0].dims[1]; }
    std::size_t kernel_size() const { return wx[0].dims[2]; }

    void validate() const {
        const std::size_t hc = hidden_channels(), ic = in_channels(), k = kernel_size();
        for (int g = 0; g < 4; ++g) {
            if (wx[g].dims != std::vector<std::size_t>{hc, ic, k, k} ||
                wh[g].dims != std::vector<std::size_t>{hc, hc, k, k} ||
                bias[g].dims != std::vector<std::size_t>{hc})
                throw std::invalid_argument("ConvLSTMParams: inconsistent gate shapes");
        }
        if (k % 2 == 0) throw std::invalid_argument("ConvLSTMParams: kernel size must be odd");
    }
};

struct ConvLSTMState {
    Tensor h;  // (hidden, H, W)
    Tensor c;

    static ConvLSTMState zeros(std::size_t hidden, std::size_t H, std::size_t W) {
        return {Tensor({hidden, H, W}), Tensor({hidden, H, W})};
    }
};

// Per-step saved values for BPTT.
struct ConvLSTMStepCache {
    Tensor x;
    Tensor h_prev, c_prev;
    std::array<Tensor, 4> gate;  // post-activation i, f, o, g
    Tensor c_new;
    Tensor tanh_c_new;
};

namespace detail {
inline ConvParams gate_conv(const Tensor& kernel, const Tensor& bias) {
    return ConvParams{kernel, bias, Padding::same};
}
inline ConvParams gate_conv_nobias(const Tensor& kernel) {
    return ConvParams{kernel, Tensor({kernel.dims[0]}), Padding::same};
}
}  // namespace detail

inline ConvLSTMState cell_step(const Tensor& x, const ConvLSTMState& state,
                               const ConvLSTMParams& p, ConvLSTMStepCache* cache = nullptr) {
    p.validate();
    if (x.rank() != 3 || x.dims[0] != p.in_channels())
        throw std::invalid_argument("cell_step: input " + x.shape_str() +
                                    " does not match params (in_channels " +
                                    std::to_string(p.in_channels()) + ")");
    if (state.h.dims != std::vector<std::size_t>{p.hidden_channels(), x.dims[1], x.dims[2]})
        throw std::invalid_argument("cell_step: state " + state.h.shape_str() +
                                    " does not match input " + x.shape_str());
    check_same_shape(state.h, state.c, "cell_step state");

    std::array<Tensor, 4> gate;
    for (int g = 0; g < 4; ++g) {
        Tensor pre = conv2d(x, detail::gate_conv(p.wx[g], p.bias[g]));
        Tensor hpart = conv2d(state.h, detail::gate_conv_nobias(p.wh[g]));
        for (std::size_t i = 0; i < pre.numel(); ++i) pre.v[i] += hpart.v[i];
        gate[g] = activate(pre, g == 3 ? Activation::tanh : Activation::sigmoid);
    }

    ConvLSTMState next;
    next.c = zeros_like(state.c);
    next.h = zeros_like(state.h);
    Tensor tanh_c = zeros_like(state.c);
    for (std::size_t i = 0; i < next.c.numel(); ++i) {
        next.c.v[i] = gate[1].v[i] * state.c.v[i] + gate[0].v[i] * gate[3].v[i];
        tanh_c.v[i] = std::tanh(next.c.v[i]);
        next.h.v[i] = gate[2].v[i] * tanh_c.v[i];
    }
    if (cache) *cache = {x, state.h, state.c, gate, next.c, tanh_c};
    return next;
}

enum class ReturnMode { last, all };

struct ConvLSTMSequenceCache {
    std::vector<ConvLSTMStepCache> steps;
};

// Runs the cell over xs from a zero initial state. mode=last returns {h_T},
// mode=all returns {h_1..h_T}.
inline std::vector<Tensor> forward_sequence(const std::vector<Tensor>& xs,
                                            const ConvLSTMParams& p, ReturnMode mode,
                                            ConvLSTMSequenceCache* cache = nullptr) {
    if (xs.empty()) throw std::invalid_argument("forward_sequence: empty input sequence");
    ConvLSTMState state =
        ConvLSTMState::zeros(p.hidden_channels(), xs[0].dims[1], xs[0].dims[2]);
    if (cache) cache->steps.resize(xs.size());
    std::vector<Tensor> outs;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        state = cell_step(xs[t], state, p, cache ? &cache->steps[t] : nullptr);
        if (mode == ReturnMode::all) outs.push_back(state.h);
    }
    if (mode == ReturnMode::last) outs.push_back(state.h);
    return outs;
}

struct ConvLSTMGrads {
    std::vector<Tensor> grad_xs;
    ConvLSTMParams grad_params;  // same shapes as params, gradient values
};

inline ConvLSTMParams zero_params_like(const ConvLSTMParams& p) {
    ConvLSTMParams g;
    for (int i = 0; i < 4; ++i) {
        g.wx[i] = zeros_like(p.wx[i]);
        g.wh[i] = zeros_like(p.wh[i]);
        g.bias[i] = zeros_like(p.bias[i]);
    }
    return g;
}

// Exact backpropagation through time. grad_outs holds one gradient per
// returned output (T entries for mode=all, one for mode=last).
inline ConvLSTMGrads backward_sequence(const std::vector<Tensor>& xs, const ConvLSTMParams& p,
                                       const ConvLSTMSequenceCache& cache,
                                       const std::vector<Tensor>& grad_outs, ReturnMode mode) {
    const std::size_t T = xs.size();
    if (cache.steps.size() != T)
        throw std::invalid_argument("backward_sequence: cache does not match sequence");
    if ((mode == ReturnMode::last && grad_outs.size() != 1) ||
        (mode == ReturnMode::all && grad_outs.size() != T))
        throw std::invalid_argument("backward_sequence: grad_outs size " +
                                    std::to_string(grad_outs.size()) +
                                    " does not match return mode");

    ConvLSTMGrads out;
    out.grad_xs.resize(T);
    out.grad_params = zero_params_like(p);

    Tensor grad_h = zeros_like(cache.steps[T - 1].h_prev);  // dL/dh_t carried backwards
    Tensor grad_c = zeros_like(grad_h);

    for (std::size_t ti = T; ti-- > 0;) {
        const ConvLSTMStepCache& sc = cache.steps[ti];
        if (mode == ReturnMode::all)
            for (std::size_t i = 0; i < grad_h.numel(); ++i) grad_h.v[i] += grad_outs[ti].v[i];
        else if (ti == T - 1)
            for (std::size_t i = 0; i < grad_h.numel(); ++i) grad_h.v[i] += grad_outs[0].v[i];

        // h' = o.tanh(c'); c' = f.c + i.g
        const std::size_t n = grad_h.numel();
        Tensor grad_c_total = grad_c;
        std::array<Tensor, 4> grad_gate_pre;  // gradients at gate pre-activations
        for (int g = 0; g < 4; ++g) grad_gate_pre[g] = zeros_like(grad_h);
        Tensor grad_c_prev = zeros_like(grad_h);

        for (std::size_t i = 0; i < n; ++i) {
            const double o = sc.gate[2].v[i], tc = sc.tanh_c_new.v[i];
            grad_c_total.v[i] += grad_h.v[i] * o * (1.0 - tc * tc);
            const double gi = sc.gate[0].v[i], gf = sc.gate[1].v[i], gg = sc.gate[3].v[i];
            grad_gate_pre[2].v[i] = grad_h.v[i] * tc * o * (1.0 - o);
            grad_gate_pre[0].v[i] = grad_c_total.v[i] * gg * gi * (1.0 - gi);
            grad_gate_pre[1].v[i] = grad_c_total.v[i] * sc.c_prev.v[i] * gf * (1.0 - gf);
            grad_gate_pre[3].v[i] = grad_c_total.v[i] * gi * (1.0 - gg * gg);
            grad_c_prev.v[i] = grad_c_total.v[i] * gf;
        }

        Tensor grad_x = Tensor(sc.x.dims);
        Tensor grad_h_prev = zeros_like(grad_h);
        for (int g = 0; g < 4; ++g) {
            ConvGrads gx = conv2d_backward(sc.x, detail::gate_conv(p.wx[g], p.bias[g]),
                                           grad_gate_pre[g]);
            ConvGrads gh = conv2d_backward(sc.h_prev, detail::gate_conv_nobias(p.wh[g]),
                                           grad_gate_pre[g]);
            for (std::size_t i = 0; i < grad_x.numel(); ++i) grad_x.v[i] += gx.grad_input.v[i];
            for (std::size_t i = 0; i < grad_h_prev.numel(); ++i)
                grad_h_prev.v[i] += gh.grad_input.v[i];
            for (std::size_t i = 0; i < out.grad_params.wx[g].numel(); ++i)
                out.grad_params.wx[g].v[i] += gx.grad_kernel.v[i];
            for (std::size_t i = 0; i < out.grad_params.wh[g].numel(); ++i)
                out.grad_params.wh[g].v[i] += gh.grad_kernel.v[i];
            for (std::size_t i = 0; i < out.grad_params.bias[g].numel(); ++i)
                out.grad_params.bias[g].v[i] += gx.grad_bias.v[i];
        }
        out.grad_xs[ti] = std::move(grad_x);
        grad_h = std::move(grad_h_prev);
        grad_c = std::move(grad_c_prev);
    }
    return out;
}

}  // namespace vx
