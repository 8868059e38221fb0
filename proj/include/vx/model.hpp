#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vx/convlstm.hpp"
#include "vx/ops.hpp"

// The three architectures: recurrent U-Net next-frame predictor, plain 2-D
// U-Net baseline (time as channels), and recurrent autoencoder. Encoders use
// 3-D convolutions with spatial-only max pooling so the time axis survives to
// the ConvLSTM units; decoders of the predictors are 2-D after time has been
// collapsed.

namespace vx {

enum class ModelKind { recurrent_unet, unet2d, recurrent_autoencoder };
enum class SkipMode { convlstm_last, last_frame };

struct ModelSpec {
    ModelKind kind = ModelKind::recurrent_unet;
    std::size_t levels = 2;
    std::vector<std::size_t> channels = {16, 32};
    std::size_t bottleneck_channels = 64;
    std::vector<std::size_t> convlstm_hidden;  // empty = per-level channel count
    SkipMode skip_mode = SkipMode::convlstm_last;
    Activation output_activation = Activation::linear;
    std::size_t T = 20;

    std::size_t spatial_divisor() const { return std::size_t{1} << levels; }

    std::size_t skip_hidden(std::size_t level) const {
        if (!convlstm_hidden.empty()) return convlstm_hidden[level];
        return channels[level];
    }

    void validate() const {
        if (levels < 1) throw std::invalid_argument("ModelSpec: levels must be >= 1");
        if (channels.size() != levels)
            throw std::invalid_argument("ModelSpec: channels length " +
                                        std::to_string(channels.size()) + " != levels " +
                                        std::to_string(levels));
        if (!convlstm_hidden.empty() && convlstm_hidden.size() != levels)
            throw std::invalid_argument("ModelSpec: convlstm_hidden length must equal levels");
        if (T < 1) throw std::invalid_argument("ModelSpec: T must be >= 1");
        if (bottleneck_channels < 1)
            throw std::invalid_argument("ModelSpec: bottleneck_channels must be >= 1");
        for (std::size_t c : channels)
            if (c < 1) throw std::invalid_argument("ModelSpec: channels must be positive");
    }
};

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::recurrent_unet: return "recurrent_unet";
        case ModelKind::unet2d: return "unet2d";
        case ModelKind::recurrent_autoencoder: return "recurrent_autoencoder";
    }
    return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "recurrent_unet") return ModelKind::recurrent_unet;
    if (s == "unet2d") return ModelKind::unet2d;
    if (s == "recurrent_autoencoder") return ModelKind::recurrent_autoencoder;
    throw std::invalid_argument("unknown model kind: " + s);
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return nlohmann::json{
        {"kind", to_string(s.kind)},
        {"levels", s.levels},
        {"channels", s.channels},
        {"bottleneck_channels", s.bottleneck_channels},
        {"convlstm_hidden", s.convlstm_hidden},
        {"skip_mode", s.skip_mode == SkipMode::convlstm_last ? "convlstm_last" : "last_frame"},
        {"output_activation",
         s.output_activation == Activation::linear ? "linear" : "sigmoid"},
        {"t", s.T}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.kind = model_kind_from_string(j.at("kind").get<std::string>());
    s.levels = j.at("levels").get<std::size_t>();
    s.channels = j.at("channels").get<std::vector<std::size_t>>();
    s.bottleneck_channels = j.at("bottleneck_channels").get<std::size_t>();
    s.convlstm_hidden = j.at("convlstm_hidden").get<std::vector<std::size_t>>();
    const auto sm = j.at("skip_mode").get<std::string>();
    if (sm != "convlstm_last" && sm != "last_frame")
        throw std::invalid_argument("unknown skip_mode: " + sm);
    s.skip_mode = sm == "convlstm_last" ? SkipMode::convlstm_last : SkipMode::last_frame;
    const auto oa = j.at("output_activation").get<std::string>();
    if (oa != "linear" && oa != "sigmoid")
        throw std::invalid_argument("unknown output_activation: " + oa);
    s.output_activation = oa == "linear" ? Activation::linear : Activation::sigmoid;
    s.T = j.at("t").get<std::size_t>();
    s.validate();
    return s;
}

// Named parameter collection. Iteration order (lexicographic) is the
// canonical order for serialization and the optimizer.
struct ModelWeights {
    std::map<std::string, Tensor> params;

    Tensor& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("missing parameter: " + name);
        return it->second;
    }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [k, t] : params) n += t.numel();
        return n;
    }
};

namespace detail {

constexpr std::size_t kConvKernel = 3;

inline const char* gate_names[4] = {"i", "f", "o", "g"};

// Declaration order defines the init RNG consumption order.
struct ParamDecl {
    std::string name;
    std::vector<std::size_t> dims;
};

inline void declare_lstm(std::vector<ParamDecl>& out, const std::string& prefix,
                         std::size_t in_ch, std::size_t hidden) {
    for (int g = 0; g < 4; ++g)
        out.push_back({prefix + ".wx" + gate_names[g], {hidden, in_ch, kConvKernel, kConvKernel}});
    for (int g = 0; g < 4; ++g)
        out.push_back({prefix + ".wh" + gate_names[g], {hidden, hidden, kConvKernel, kConvKernel}});
    for (int g = 0; g < 4; ++g) out.push_back({prefix + ".b" + gate_names[g], {hidden}});
}

inline std::vector<ParamDecl> param_decls(const ModelSpec& s) {
    s.validate();
    std::vector<ParamDecl> d;
    const std::size_t L = s.levels, K = kConvKernel;
    const bool conv3 = s.kind != ModelKind::unet2d;

    auto conv_dims = [&](std::size_t out_c, std::size_t in_c, bool three_d,
                         std::size_t k) -> std::vector<std::size_t> {
        return three_d ? std::vector<std::size_t>{out_c, in_c, k, k, k}
                       : std::vector<std::size_t>{out_c, in_c, k, k};
    };

    std::size_t in_c = s.kind == ModelKind::unet2d ? s.T : 1;
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "enc" + std::to_string(l);
        d.push_back({p + ".conv1.kernel", conv_dims(s.channels[l], in_c, conv3, K)});
        d.push_back({p + ".conv1.bias", {s.channels[l]}});
        d.push_back({p + ".conv2.kernel", conv_dims(s.channels[l], s.channels[l], conv3, K)});
        d.push_back({p + ".conv2.bias", {s.channels[l]}});
        in_c = s.channels[l];
    }

    if (s.kind == ModelKind::unet2d) {
        d.push_back({"bottleneck.conv1.kernel",
                     conv_dims(s.bottleneck_channels, s.channels[L - 1], false, K)});
        d.push_back({"bottleneck.conv1.bias", {s.bottleneck_channels}});
        d.push_back({"bottleneck.conv2.kernel",
                     conv_dims(s.bottleneck_channels, s.bottleneck_channels, false, K)});
        d.push_back({"bottleneck.conv2.bias", {s.bottleneck_channels}});
    } else {
        declare_lstm(d, "bottleneck.lstm", s.channels[L - 1], s.bottleneck_channels);
    }

    if (s.kind == ModelKind::recurrent_unet && s.skip_mode == SkipMode::convlstm_last)
        for (std::size_t l = 0; l < L; ++l)
            declare_lstm(d, "skip" + std::to_string(l) + ".lstm", s.channels[l],
                         s.skip_hidden(l));

    const bool dec3 = s.kind == ModelKind::recurrent_autoencoder;
    if (s.kind != ModelKind::recurrent_autoencoder) {
        // U-Net decoders concatenate the skip features before the first conv.
        for (std::size_t l = L; l-- > 0;) {
            const std::size_t prev = l == L - 1 ? s.bottleneck_channels : s.channels[l + 1];
            const std::size_t skip_c =
                s.kind == ModelKind::recurrent_unet && s.skip_mode == SkipMode::convlstm_last
                    ? s.skip_hidden(l)
                    : s.channels[l];
            const std::string p = "dec" + std::to_string(l);
            d.push_back({p + ".conv1.kernel", conv_dims(s.channels[l], prev + skip_c, false, K)});
            d.push_back({p + ".conv1.bias", {s.channels[l]}});
            d.push_back(
                {p + ".conv2.kernel", conv_dims(s.channels[l], s.channels[l], false, K)});
            d.push_back({p + ".conv2.bias", {s.channels[l]}});
        }
    } else {
        for (std::size_t l = L; l-- > 0;) {
            const std::size_t prev = l == L - 1 ? s.bottleneck_channels : s.channels[l + 1];
            const std::string p = "dec" + std::to_string(l);
            d.push_back({p + ".conv1.kernel", conv_dims(s.channels[l], prev, true, K)});
            d.push_back({p + ".conv1.bias", {s.channels[l]}});
            d.push_back(
                {p + ".conv2.kernel", conv_dims(s.channels[l], s.channels[l], true, K)});
            d.push_back({p + ".conv2.bias", {s.channels[l]}});
        }
    }

    d.push_back({"out.conv.kernel", conv_dims(1, s.channels[0], dec3, 1)});
    d.push_back({"out.conv.bias", {1}});
    return d;
}

}  // namespace detail

// Seeded deterministic initialization: kernels uniform in +-1/sqrt(fan_in),
// biases zero, ConvLSTM forget-gate biases 1.
inline ModelWeights build(const ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelWeights w;
    for (const auto& decl : detail::param_decls(spec)) {
        Tensor t(decl.dims);
        const bool is_kernel = decl.dims.size() > 1;
        if (is_kernel) {
            std::size_t fan_in = 1;
            for (std::size_t a = 1; a < decl.dims.size(); ++a) fan_in *= decl.dims[a];
            fill_uniform(t, rng, 1.0 / std::sqrt((double)fan_in));
        } else if (decl.name.size() > 3 &&
                   decl.name.compare(decl.name.size() - 3, 3, ".bf") == 0) {
            t.fill(1.0);
        }
        w.params.emplace(decl.name, std::move(t));
    }
    return w;
}

// ---------------------------------------------------------------------------
// time axis helpers

inline std::vector<Tensor> split_time(const Tensor& x) {
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2], T = x.dims[3];
    std::vector<Tensor> frames(T, Tensor({C, H, W}));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                for (std::size_t t = 0; t < T; ++t)
                    frames[t].at(c, y, xx) = x.at(c, y, xx, t);
    return frames;
}

inline Tensor stack_time(const std::vector<Tensor>& frames) {
    const std::size_t T = frames.size();
    const std::size_t C = frames[0].dims[0], H = frames[0].dims[1], W = frames[0].dims[2];
    Tensor out({C, H, W, T});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) out.at(c, y, xx, t) = frames[t].at(c, y, xx);
    return out;
}

inline Tensor time_slice(const Tensor& x, std::size_t t) {
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2], T = x.dims[3];
    Tensor out({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out.at(c, y, xx) = x.at(c, y, xx, t);
    return out;
}

namespace detail {

inline ConvLSTMParams lstm_params_view(const ModelWeights& w, const std::string& prefix) {
    ConvLSTMParams p;
    for (int g = 0; g < 4; ++g) {
        p.wx[g] = w.at(prefix + ".wx" + gate_names[g]);
        p.wh[g] = w.at(prefix + ".wh" + gate_names[g]);
        p.bias[g] = w.at(prefix + ".b" + gate_names[g]);
    }
    return p;
}

inline void lstm_grads_into(ModelWeights& grads, const std::string& prefix,
                            const ConvLSTMParams& g) {
    for (int gi = 0; gi < 4; ++gi) {
        grads.at(prefix + ".wx" + gate_names[gi]) = g.wx[gi];
        grads.at(prefix + ".wh" + gate_names[gi]) = g.wh[gi];
        grads.at(prefix + ".b" + gate_names[gi]) = g.bias[gi];
    }
}

inline ConvParams conv_view(const ModelWeights& w, const std::string& prefix,
                            Padding pad = Padding::same) {
    return ConvParams{w.at(prefix + ".kernel"), w.at(prefix + ".bias"), pad};
}

struct ConvActCache {
    Tensor in;
    Tensor pre1, a1, pre2, a2;
};

inline void accumulate(Tensor& dst, const Tensor& src) {
    check_same_shape(dst, src, "accumulate");
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.v[i] += src.v[i];
}

// conv -> act -> conv -> act, shared by encoder and decoder levels
template <typename Fwd>
inline Tensor conv_act_pair(const ModelWeights& w, const std::string& p1, const std::string& p2,
                            const Tensor& in, Activation act, Fwd fwd, ConvActCache* cache) {
    Tensor pre1 = fwd(in, conv_view(w, p1));
    Tensor a1 = activate(pre1, act);
    Tensor pre2 = fwd(a1, conv_view(w, p2));
    Tensor a2 = activate(pre2, act);
    if (cache) *cache = {in, std::move(pre1), std::move(a1), std::move(pre2), a2};
    return a2;
}

template <typename Bwd>
inline Tensor conv_act_pair_backward(const ModelWeights& w, ModelWeights& grads,
                                     const std::string& p1, const std::string& p2,
                                     const ConvActCache& c, Activation act,
                                     const Tensor& grad_out, Bwd bwd) {
    Tensor g2 = activate_backward(c.pre2, act, grad_out);
    ConvGrads cg2 = bwd(c.a1, conv_view(w, p2), g2);
    accumulate(grads.at(p2 + ".kernel"), cg2.grad_kernel);
    accumulate(grads.at(p2 + ".bias"), cg2.grad_bias);
    Tensor g1 = activate_backward(c.pre1, act, cg2.grad_input);
    ConvGrads cg1 = bwd(c.in, conv_view(w, p1), g1);
    accumulate(grads.at(p1 + ".kernel"), cg1.grad_kernel);
    accumulate(grads.at(p1 + ".bias"), cg1.grad_bias);
    return cg1.grad_input;
}

}  // namespace detail

inline ModelWeights zero_grads(const ModelWeights& w) {
    ModelWeights g;
    for (const auto& [k, t] : w.params) g.params.emplace(k, Tensor(t.dims));
    return g;
}

// ---------------------------------------------------------------------------
// Forward/backward caches

struct EncLevelCache {
    detail::ConvActCache convs;
    PoolResult pool;
};

struct LstmRunCache {
    std::vector<Tensor> frames;
    ConvLSTMSequenceCache seq;
};

struct ModelCache {
    Tensor input;
    std::vector<EncLevelCache> enc;
    LstmRunCache bottleneck;               // recurrent kinds
    detail::ConvActCache bottleneck2d;     // unet2d
    std::vector<LstmRunCache> skips;       // recurrent_unet, convlstm_last
    std::vector<Tensor> skip_values;       // per level, what the decoder concatenated
    std::vector<Tensor> dec_in;            // per level, decoder input before upsample
    std::vector<Tensor> dec_up;            // after upsample (before concat for U-Nets)
    std::vector<Tensor> dec_cat;           // after concat (U-Nets only)
    std::vector<detail::ConvActCache> dec; // per level conv pair
    Tensor out_in;                         // input of the final 1x1 conv
    Tensor out_pre;                        // pre output activation
};

namespace detail {

constexpr Activation kHiddenAct = Activation::relu;

inline void check_spatial(const ModelSpec& s, std::size_t H, std::size_t W) {
    const std::size_t d = s.spatial_divisor();
    if (H % d != 0 || W % d != 0)
        throw std::invalid_argument("input spatial dims " + std::to_string(H) + "x" +
                                    std::to_string(W) + " not divisible by " +
                                    std::to_string(d) + " (levels=" + std::to_string(s.levels) +
                                    ")");
}

}  // namespace detail

// Recurrent U-Net next-frame prediction: clip (1,H,W,T) -> frame (1,H,W).
inline Tensor predictor_forward(const ModelSpec& s, const ModelWeights& w, const Tensor& clip,
                                ModelCache* cache = nullptr) {
    if (s.kind != ModelKind::recurrent_unet)
        throw std::invalid_argument("predictor_forward: spec kind is " + to_string(s.kind));
    if (clip.rank() != 4 || clip.dims[0] != 1)
        throw std::invalid_argument("predictor_forward: clip must be (1,H,W,T), got " +
                                    clip.shape_str());
    if (clip.dims[3] != s.T)
        throw std::invalid_argument("predictor_forward: clip has T=" +
                                    std::to_string(clip.dims[3]) + ", spec requires T=" +
                                    std::to_string(s.T));
    detail::check_spatial(s, clip.dims[1], clip.dims[2]);
    const std::size_t L = s.levels;
    ModelCache local;
    if (!cache) cache = &local;
    {
        cache->input = clip;
        cache->enc.resize(L);
        cache->skips.resize(L);
        cache->skip_values.resize(L);
        cache->dec_in.resize(L);
        cache->dec_up.resize(L);
        cache->dec_cat.resize(L);
        cache->dec.resize(L);
    }

    // 3-D conv encoder; spatial pooling keeps the time axis.
    Tensor x = clip;
    std::vector<Tensor> pre_pool(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "enc" + std::to_string(l);
        Tensor a = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", x, detail::kHiddenAct,
                                         [](const Tensor& t, const ConvParams& cp) {
                                             return conv3d(t, cp);
                                         },
                                         &cache->enc[l].convs);
        pre_pool[l] = a;
        PoolResult pr = max_pool_spatial(a);
        x = pr.output;
        cache->enc[l].pool = std::move(pr);
    }

    // Bottleneck ConvLSTM collapses time via its last output.
    LstmRunCache* bn = &cache->bottleneck;
    bn->frames = split_time(x);
    ConvLSTMParams bn_params = detail::lstm_params_view(w, "bottleneck.lstm");
    Tensor y = forward_sequence(bn->frames, bn_params, ReturnMode::last, &bn->seq).back();

    // Skips: per-level ConvLSTM last output, or the final temporal slice.
    std::vector<Tensor> skip_vals(L);
    for (std::size_t l = 0; l < L; ++l) {
        if (s.skip_mode == SkipMode::convlstm_last) {
            LstmRunCache* sk = &cache->skips[l];
            sk->frames = split_time(pre_pool[l]);
            ConvLSTMParams sp = detail::lstm_params_view(w, "skip" + std::to_string(l) + ".lstm");
            skip_vals[l] = forward_sequence(sk->frames, sp, ReturnMode::last, &sk->seq).back();
        } else {
            skip_vals[l] = time_slice(pre_pool[l], pre_pool[l].dims[3] - 1);
        }
        cache->skip_values[l] = skip_vals[l];
    }

    // 2-D decoder with skip concatenation.
    for (std::size_t l = L; l-- > 0;) {
        cache->dec_in[l] = y;
        Tensor up = upsample_nearest(y);
        Tensor cat = concat_channels(skip_vals[l], up);
        if (cache) {
            cache->dec_up[l] = up;
            cache->dec_cat[l] = cat;
        }
        const std::string p = "dec" + std::to_string(l);
        y = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", cat, detail::kHiddenAct,
                                  [](const Tensor& t, const ConvParams& cp) {
                                      return conv2d(t, cp);
                                  },
                                  &cache->dec[l]);
    }

    cache->out_in = y;
    Tensor out_pre = conv2d(y, detail::conv_view(w, "out.conv"));
    cache->out_pre = out_pre;
    return activate(out_pre, s.output_activation);
}

inline ModelWeights predictor_backward(const ModelSpec& s, const ModelWeights& w,
                                       const ModelCache& c, const Tensor& grad_out,
                                       Tensor* grad_input = nullptr) {
    const std::size_t L = s.levels;
    ModelWeights grads = zero_grads(w);

    Tensor g = activate_backward(c.out_pre, s.output_activation, grad_out);
    ConvGrads og = conv2d_backward(c.out_in, detail::conv_view(w, "out.conv"), g);
    detail::accumulate(grads.at("out.conv.kernel"), og.grad_kernel);
    detail::accumulate(grads.at("out.conv.bias"), og.grad_bias);
    g = og.grad_input;

    std::vector<Tensor> grad_skip(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "dec" + std::to_string(l);
        Tensor gcat = detail::conv_act_pair_backward(
            w, grads, p + ".conv1", p + ".conv2", c.dec[l], detail::kHiddenAct, g,
            [](const Tensor& in, const ConvParams& cp, const Tensor& go) {
                return conv2d_backward(in, cp, go);
            });
        auto [gs, gup] = concat_channels_backward(c.skip_values[l], c.dec_up[l], gcat);
        grad_skip[l] = std::move(gs);
        g = upsample_nearest_backward(c.dec_in[l], gup);
    }

    // g is now the gradient at the bottleneck ConvLSTM output.
    ConvLSTMParams bn_params = detail::lstm_params_view(w, "bottleneck.lstm");
    ConvLSTMGrads bn = backward_sequence(c.bottleneck.frames, bn_params, c.bottleneck.seq, {g},
                                         ReturnMode::last);
    detail::lstm_grads_into(grads, "bottleneck.lstm", bn.grad_params);
    Tensor grad_pool_out = stack_time(bn.grad_xs);

    // Encoder backward, merging skip gradients at each level's pre-pool map.
    Tensor gx = grad_pool_out;
    for (std::size_t l = L; l-- > 0;) {
        Tensor grad_pre_pool =
            max_pool_spatial_backward(c.enc[l].pool, c.enc[l].convs.a2, gx);
        if (s.skip_mode == SkipMode::convlstm_last) {
            const std::string sp = "skip" + std::to_string(l) + ".lstm";
            ConvLSTMParams p = detail::lstm_params_view(w, sp);
            ConvLSTMGrads sg = backward_sequence(c.skips[l].frames, p, c.skips[l].seq,
                                                 {grad_skip[l]}, ReturnMode::last);
            detail::lstm_grads_into(grads, sp, sg.grad_params);
            detail::accumulate(grad_pre_pool, stack_time(sg.grad_xs));
        } else {
            const std::size_t T = grad_pre_pool.dims[3];
            const std::size_t C = grad_pre_pool.dims[0], H = grad_pre_pool.dims[1],
                              W = grad_pre_pool.dims[2];
            for (std::size_t ch = 0; ch < C; ++ch)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x)
                        grad_pre_pool.at(ch, y, x, T - 1) += grad_skip[l].at(ch, y, x);
        }
        const std::string p = "enc" + std::to_string(l);
        gx = detail::conv_act_pair_backward(
            w, grads, p + ".conv1", p + ".conv2", c.enc[l].convs, detail::kHiddenAct,
            grad_pre_pool, [](const Tensor& in, const ConvParams& cp, const Tensor& go) {
                return conv3d_backward(in, cp, go);
            });
    }
    if (grad_input) *grad_input = gx;
    return grads;
}

// Plain 2-D U-Net baseline: clip (T,H,W) (time as channels) -> frame (1,H,W).
inline Tensor unet2d_forward(const ModelSpec& s, const ModelWeights& w, const Tensor& clip,
                             ModelCache* cache = nullptr) {
    if (s.kind != ModelKind::unet2d)
        throw std::invalid_argument("unet2d_forward: spec kind is " + to_string(s.kind));
    if (clip.rank() != 3)
        throw std::invalid_argument("unet2d_forward: clip must be (T,H,W), got " +
                                    clip.shape_str());
    if (clip.dims[0] != s.T)
        throw std::invalid_argument("unet2d_forward: clip has T=" + std::to_string(clip.dims[0]) +
                                    ", spec requires T=" + std::to_string(s.T));
    detail::check_spatial(s, clip.dims[1], clip.dims[2]);
    const std::size_t L = s.levels;
    ModelCache local;
    if (!cache) cache = &local;
    {
        cache->input = clip;
        cache->enc.resize(L);
        cache->skip_values.resize(L);
        cache->dec_in.resize(L);
        cache->dec_up.resize(L);
        cache->dec_cat.resize(L);
        cache->dec.resize(L);
    }

    auto fwd2 = [](const Tensor& t, const ConvParams& cp) { return conv2d(t, cp); };

    Tensor x = clip;
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "enc" + std::to_string(l);
        Tensor a = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", x, detail::kHiddenAct,
                                         fwd2, &cache->enc[l].convs);
        cache->skip_values[l] = a;
        PoolResult pr = max_pool_spatial(a);
        x = pr.output;
        cache->enc[l].pool = std::move(pr);
    }

    Tensor y = detail::conv_act_pair(w, "bottleneck.conv1", "bottleneck.conv2", x,
                                     detail::kHiddenAct, fwd2,
                                     &cache->bottleneck2d);

    for (std::size_t l = L; l-- > 0;) {
        cache->dec_in[l] = y;
        Tensor up = upsample_nearest(y);
        Tensor cat = concat_channels(cache->skip_values[l], up);
        if (cache) {
            cache->dec_up[l] = up;
            cache->dec_cat[l] = cat;
        }
        const std::string p = "dec" + std::to_string(l);
        y = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", cat, detail::kHiddenAct, fwd2,
                                  &cache->dec[l]);
    }

    cache->out_in = y;
    Tensor out_pre = conv2d(y, detail::conv_view(w, "out.conv"));
    cache->out_pre = out_pre;
    return activate(out_pre, s.output_activation);
}

inline ModelWeights unet2d_backward(const ModelSpec& s, const ModelWeights& w,
                                    const ModelCache& c, const Tensor& grad_out,
                                    Tensor* grad_input = nullptr) {
    const std::size_t L = s.levels;
    ModelWeights grads = zero_grads(w);
    auto bwd2 = [](const Tensor& in, const ConvParams& cp, const Tensor& go) {
        return conv2d_backward(in, cp, go);
    };

    Tensor g = activate_backward(c.out_pre, s.output_activation, grad_out);
    ConvGrads og = conv2d_backward(c.out_in, detail::conv_view(w, "out.conv"), g);
    detail::accumulate(grads.at("out.conv.kernel"), og.grad_kernel);
    detail::accumulate(grads.at("out.conv.bias"), og.grad_bias);
    g = og.grad_input;

    std::vector<Tensor> grad_skip(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "dec" + std::to_string(l);
        Tensor gcat = detail::conv_act_pair_backward(w, grads, p + ".conv1", p + ".conv2",
                                                     c.dec[l], detail::kHiddenAct, g, bwd2);
        auto [gs, gup] = concat_channels_backward(c.skip_values[l], c.dec_up[l], gcat);
        grad_skip[l] = std::move(gs);
        g = upsample_nearest_backward(c.dec_in[l], gup);
    }

    g = detail::conv_act_pair_backward(w, grads, "bottleneck.conv1", "bottleneck.conv2",
                                       c.bottleneck2d, detail::kHiddenAct, g, bwd2);

    for (std::size_t l = L; l-- > 0;) {
        Tensor grad_pre_pool = max_pool_spatial_backward(c.enc[l].pool, c.enc[l].convs.a2, g);
        detail::accumulate(grad_pre_pool, grad_skip[l]);
        const std::string p = "enc" + std::to_string(l);
        g = detail::conv_act_pair_backward(w, grads, p + ".conv1", p + ".conv2", c.enc[l].convs,
                                           detail::kHiddenAct, grad_pre_pool, bwd2);
    }
    if (grad_input) *grad_input = g;
    return grads;
}

// Recurrent autoencoder: clip (1,H,W,T) -> reconstruction (1,H,W,T).
inline Tensor autoencoder_forward(const ModelSpec& s, const ModelWeights& w, const Tensor& clip,
                                  ModelCache* cache = nullptr) {
    if (s.kind != ModelKind::recurrent_autoencoder)
        throw std::invalid_argument("autoencoder_forward: spec kind is " + to_string(s.kind));
    if (clip.rank() != 4 || clip.dims[0] != 1)
        throw std::invalid_argument("autoencoder_forward: clip must be (1,H,W,T), got " +
                                    clip.shape_str());
    if (clip.dims[3] != s.T)
        throw std::invalid_argument("autoencoder_forward: clip has T=" +
                                    std::to_string(clip.dims[3]) + ", spec requires T=" +
                                    std::to_string(s.T));
    detail::check_spatial(s, clip.dims[1], clip.dims[2]);
    const std::size_t L = s.levels;
    ModelCache local;
    if (!cache) cache = &local;
    {
        cache->input = clip;
        cache->enc.resize(L);
        cache->dec_in.resize(L);
        cache->dec_up.resize(L);
        cache->dec.resize(L);
    }

    auto fwd3 = [](const Tensor& t, const ConvParams& cp) { return conv3d(t, cp); };

    Tensor x = clip;
    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "enc" + std::to_string(l);
        Tensor a = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", x, detail::kHiddenAct,
                                         fwd3, &cache->enc[l].convs);
        PoolResult pr = max_pool_spatial(a);
        x = pr.output;
        cache->enc[l].pool = std::move(pr);
    }

    // Bottleneck ConvLSTM keeps the whole hidden sequence.
    LstmRunCache* bn = &cache->bottleneck;
    bn->frames = split_time(x);
    ConvLSTMParams bn_params = detail::lstm_params_view(w, "bottleneck.lstm");
    std::vector<Tensor> hs = forward_sequence(bn->frames, bn_params, ReturnMode::all, &bn->seq);
    Tensor y = stack_time(hs);

    for (std::size_t l = L; l-- > 0;) {
        cache->dec_in[l] = y;
        Tensor up = upsample_nearest(y);
        cache->dec_up[l] = up;
        const std::string p = "dec" + std::to_string(l);
        y = detail::conv_act_pair(w, p + ".conv1", p + ".conv2", up, detail::kHiddenAct, fwd3,
                                  &cache->dec[l]);
    }

    cache->out_in = y;
    Tensor out_pre = conv3d(y, detail::conv_view(w, "out.conv"));
    cache->out_pre = out_pre;
    return activate(out_pre, s.output_activation);
}

inline ModelWeights autoencoder_backward(const ModelSpec& s, const ModelWeights& w,
                                         const ModelCache& c, const Tensor& grad_out,
                                         Tensor* grad_input = nullptr) {
    const std::size_t L = s.levels;
    ModelWeights grads = zero_grads(w);
    auto bwd3 = [](const Tensor& in, const ConvParams& cp, const Tensor& go) {
        return conv3d_backward(in, cp, go);
    };

    Tensor g = activate_backward(c.out_pre, s.output_activation, grad_out);
    ConvGrads og = conv3d_backward(c.out_in, detail::conv_view(w, "out.conv"), g);
    detail::accumulate(grads.at("out.conv.kernel"), og.grad_kernel);
    detail::accumulate(grads.at("out.conv.bias"), og.grad_bias);
    g = og.grad_input;

    for (std::size_t l = 0; l < L; ++l) {
        const std::string p = "dec" + std::to_string(l);
        Tensor gup = detail::conv_act_pair_backward(w, grads, p + ".conv1", p + ".conv2",
                                                    c.dec[l], detail::kHiddenAct, g, bwd3);
        g = upsample_nearest_backward(c.dec_in[l], gup);
    }

    ConvLSTMParams bn_params = detail::lstm_params_view(w, "bottleneck.lstm");
    ConvLSTMGrads bn = backward_sequence(c.bottleneck.frames, bn_params, c.bottleneck.seq,
                                         split_time(g), ReturnMode::all);
    detail::lstm_grads_into(grads, "bottleneck.lstm", bn.grad_params);
    Tensor gx = stack_time(bn.grad_xs);

    for (std::size_t l = L; l-- > 0;) {
        Tensor grad_pre_pool = max_pool_spatial_backward(c.enc[l].pool, c.enc[l].convs.a2, gx);
        const std::string p = "enc" + std::to_string(l);
        gx = detail::conv_act_pair_backward(w, grads, p + ".conv1", p + ".conv2",
                                            c.enc[l].convs, detail::kHiddenAct, grad_pre_pool,
                                            bwd3);
    }
    if (grad_input) *grad_input = gx;
    return grads;
}

// Unified dispatch on spec.kind.
inline Tensor model_forward(const ModelSpec& s, const ModelWeights& w, const Tensor& clip,
                            ModelCache* cache = nullptr) {
    switch (s.kind) {
        case ModelKind::recurrent_unet: return predictor_forward(s, w, clip, cache);
        case ModelKind::unet2d: return unet2d_forward(s, w, clip, cache);
        case ModelKind::recurrent_autoencoder: return autoencoder_forward(s, w, clip, cache);
    }
    throw std::logic_error("model_forward: bad kind");
}

inline ModelWeights model_backward(const ModelSpec& s, const ModelWeights& w,
                                   const ModelCache& c, const Tensor& grad_out,
                                   Tensor* grad_input = nullptr) {
    switch (s.kind) {
        case ModelKind::recurrent_unet: return predictor_backward(s, w, c, grad_out, grad_input);
        case ModelKind::unet2d: return unet2d_backward(s, w, c, grad_out, grad_input);
        case ModelKind::recurrent_autoencoder:
            return autoencoder_backward(s, w, c, grad_out, grad_input);
    }
    throw std::logic_error("model_backward: bad kind");
}

// ---------------------------------------------------------------------------
// Weight file: "VXW1" | u32 json length | spec JSON | u32 param count |
// per-param: u32 name length | name | u32 ndim | u32 dims... | f64 values
// (little-endian, C order).

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t x) {
    unsigned char b[4] = {(unsigned char)(x & 0xff), (unsigned char)((x >> 8) & 0xff),
                          (unsigned char)((x >> 16) & 0xff), (unsigned char)((x >> 24) & 0xff)};
    os.write((const char*)b, 4);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read((char*)b, 4))
        throw std::runtime_error(std::string("weight file truncated reading ") + what);
    return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
           ((std::uint32_t)b[3] << 24);
}

}  // namespace detail

inline void save_weights(const ModelWeights& w, const ModelSpec& spec,
                         const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_weights: cannot open " + path);
    os.write("VXW1", 4);
    const std::string js = spec_to_json(spec).dump();
    detail::write_u32(os, (std::uint32_t)js.size());
    os.write(js.data(), (std::streamsize)js.size());
    detail::write_u32(os, (std::uint32_t)w.params.size());
    for (const auto& [name, t] : w.params) {
        detail::write_u32(os, (std::uint32_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        detail::write_u32(os, (std::uint32_t)t.rank());
        for (std::size_t d : t.dims) detail::write_u32(os, (std::uint32_t)d);
        os.write((const char*)t.v.data(), (std::streamsize)(t.v.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("save_weights: write failed for " + path);
}

inline std::pair<ModelSpec, ModelWeights> load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_weights: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "VXW1")
        throw std::runtime_error("load_weights: bad magic in " + path);
    const std::uint32_t jlen = detail::read_u32(is, "spec length");
    std::string js(jlen, '\0');
    if (!is.read(js.data(), jlen)) throw std::runtime_error("load_weights: truncated spec JSON");
    ModelSpec spec;
    try {
        spec = spec_from_json(nlohmann::json::parse(js));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("load_weights: malformed spec JSON: ") + e.what());
    }

    const std::uint32_t np = detail::read_u32(is, "param count");
    ModelWeights w;
    for (std::uint32_t i = 0; i < np; ++i) {
        const std::uint32_t nlen = detail::read_u32(is, "name length");
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen))
            throw std::runtime_error("load_weights: truncated parameter name");
        const std::uint32_t nd = detail::read_u32(is, "ndim");
        std::vector<std::size_t> dims(nd);
        for (auto& d : dims) d = detail::read_u32(is, "dim");
        Tensor t(dims);
        if (!is.read((char*)t.v.data(), (std::streamsize)(t.v.size() * sizeof(double))))
            throw std::runtime_error("load_weights: truncated payload for " + name +
                                     ", expected " + std::to_string(t.v.size()) + " values");
        w.params.emplace(std::move(name), std::move(t));
    }

    // Shapes must be exactly what the spec dictates.
    const auto decls = detail::param_decls(spec);
    if (decls.size() != w.params.size())
        throw std::runtime_error("load_weights: parameter count " +
                                 std::to_string(w.params.size()) + " does not match spec (" +
                                 std::to_string(decls.size()) + ")");
    for (const auto& d : decls) {
        auto it = w.params.find(d.name);
        if (it == w.params.end())
            throw std::runtime_error("load_weights: spec expects parameter " + d.name +
                                     " (kind mismatch?)");
        if (it->second.dims != d.dims)
            throw std::runtime_error("load_weights: parameter " + d.name + " has shape " +
                                     it->second.shape_str() + ", spec requires different shape");
    }
    return {spec, std::move(w)};
}

}  // namespace vx
