#pragma once

#include <limits>
#include <optional>

#include "vx/model.hpp"

// Adam/AMSGrad with bias correction folded into the step size
// (Keras-style: v-hat is the running max of the uncorrected v).

namespace vx {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool amsgrad = true;
    std::optional<double> grad_clip_norm = 5.0;
};

struct OptimState {
    AdamConfig cfg;
    std::map<std::string, Tensor> m, v, vhat;
    std::uint64_t t = 0;

    static OptimState init(const ModelWeights& w, AdamConfig cfg) {
        OptimState s;
        s.cfg = cfg;
        for (const auto& [k, p] : w.params) {
            s.m.emplace(k, Tensor(p.dims));
            s.v.emplace(k, Tensor(p.dims));
            s.vhat.emplace(k, Tensor(p.dims));
        }
        return s;
    }
};

inline double global_grad_norm(const ModelWeights& grads) {
    double sq = 0.0;
    for (const auto& [k, g] : grads.params)
        for (double x : g.v) sq += x * x;
    return std::sqrt(sq);
}

inline void adam_step(ModelWeights& weights, const ModelWeights& grads, OptimState& st) {
    for (const auto& [k, g] : grads.params)
        check_same_shape(weights.at(k), g, "adam_step");

    double scale = 1.0;
    if (st.cfg.grad_clip_norm) {
        const double norm = global_grad_norm(grads);
        if (norm > *st.cfg.grad_clip_norm && norm > 0.0) scale = *st.cfg.grad_clip_norm / norm;
    }

    st.t += 1;
    const double step =
        st.cfg.lr * std::sqrt(1.0 - std::pow(st.cfg.beta2, (double)st.t)) /
        (1.0 - std::pow(st.cfg.beta1, (double)st.t));
    for (auto& [k, w] : weights.params) {
        const Tensor& g = grads.at(k);
        Tensor& m = st.m.at(k);
        Tensor& v = st.v.at(k);
        Tensor& vh = st.vhat.at(k);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double gi = g.v[i] * scale;
            m.v[i] = st.cfg.beta1 * m.v[i] + (1.0 - st.cfg.beta1) * gi;
            v.v[i] = st.cfg.beta2 * v.v[i] + (1.0 - st.cfg.beta2) * gi * gi;
            const double denom_v = st.cfg.amsgrad ? (vh.v[i] = std::max(vh.v[i], v.v[i]))
                                                  : v.v[i];
            w.v[i] -= step * m.v[i] / (std::sqrt(denom_v) + st.cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training on slice clips. Each clip stores T+1 frames (1,H,W,T+1); the
// predictors learn frame T from frames 0..T-1, the autoencoder reconstructs
// the first T frames.

struct TrainConfig {
    std::size_t epochs = 150;
    std::size_t batch_size = 32;
    double val_fraction = 0.10;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const {
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("TrainConfig: val_fraction must be in [0,1)");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch;
    double train_mse;
    double val_mse;  // NaN when no validation split
};

// Clip frames (1,H,W,T+1) -> model input and target for the given kind.
inline Tensor clip_model_input(const ModelSpec& s, const Tensor& clip_frames) {
    const std::size_t H = clip_frames.dims[1], W = clip_frames.dims[2];
    const std::size_t Tp1 = clip_frames.dims[3];
    if (Tp1 != s.T + 1)
        throw std::invalid_argument("clip has " + std::to_string(Tp1) + " frames, expected T+1=" +
                                    std::to_string(s.T + 1));
    if (s.kind == ModelKind::unet2d) {
        Tensor in({s.T, H, W});
        for (std::size_t t = 0; t < s.T; ++t)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) in.at(t, y, x) = clip_frames.at(0, y, x, t);
        return in;
    }
    Tensor in({1, H, W, s.T});
    for (std::size_t t = 0; t < s.T; ++t)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) in.at(0, y, x, t) = clip_frames.at(0, y, x, t);
    return in;
}

inline Tensor clip_target(const ModelSpec& s, const Tensor& clip_frames) {
    const std::size_t H = clip_frames.dims[1], W = clip_frames.dims[2];
    if (s.kind == ModelKind::recurrent_autoencoder) {
        Tensor tgt({1, H, W, s.T});
        for (std::size_t t = 0; t < s.T; ++t)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) tgt.at(0, y, x, t) = clip_frames.at(0, y, x, t);
        return tgt;
    }
    Tensor tgt({1, H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) tgt.at(0, y, x) = clip_frames.at(0, y, x, s.T);
    return tgt;
}

// Whole-frame squared loss and its parameter gradient for one clip.
inline double clip_loss_and_grads(const ModelSpec& s, const ModelWeights& w,
                                  const Tensor& clip_frames, ModelWeights* grads) {
    const Tensor in = clip_model_input(s, clip_frames);
    const Tensor tgt = clip_target(s, clip_frames);
    if (!grads) {
        const Tensor pred = model_forward(s, w, in);
        return mse_loss(pred, tgt).first;
    }
    ModelCache cache;
    const Tensor pred = model_forward(s, w, in, &cache);
    auto [loss, grad_pred] = mse_loss(pred, tgt);
    *grads = model_backward(s, w, cache, grad_pred);
    return loss;
}

struct TrainResult {
    ModelWeights weights;
    std::vector<EpochRecord> history;
};

// Deterministic mini-batch training. The first ceil(val_fraction*N) clips of
// the seeded shuffle are held out for validation; batch gradients are
// averaged in clip order.
inline TrainResult train(const ModelSpec& spec, ModelWeights weights,
                         const std::vector<Tensor>& clips, const TrainConfig& cfg,
                         const AdamConfig& adam = {}) {
    spec.validate();
    cfg.validate();
    if (clips.empty()) throw std::invalid_argument("train: empty dataset");

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_val = (std::size_t)std::ceil(cfg.val_fraction * (double)clips.size());
    if (n_val >= clips.size())
        throw std::invalid_argument("train: validation split leaves no training data");
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + (std::ptrdiff_t)n_val);
    std::vector<std::size_t> train_idx(order.begin() + (std::ptrdiff_t)n_val, order.end());

    OptimState st = OptimState::init(weights, adam);
    TrainResult res;
    res.weights = std::move(weights);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) std::shuffle(train_idx.begin(), train_idx.end(), rng);
        double train_loss_sum = 0.0;
        for (std::size_t b = 0; b < train_idx.size(); b += cfg.batch_size) {
            const std::size_t be = std::min(b + cfg.batch_size, train_idx.size());
            ModelWeights batch_grads = zero_grads(res.weights);
            for (std::size_t i = b; i < be; ++i) {
                ModelWeights g;
                train_loss_sum +=
                    clip_loss_and_grads(spec, res.weights, clips[train_idx[i]], &g);
                for (auto& [k, t] : batch_grads.params) detail::accumulate(t, g.at(k));
            }
            const double inv = 1.0 / (double)(be - b);
            for (auto& [k, t] : batch_grads.params)
                for (double& x : t.v) x *= inv;
            adam_step(res.weights, batch_grads, st);
        }
        EpochRecord rec{epoch, train_loss_sum / (double)train_idx.size(),
                        std::numeric_limits<double>::quiet_NaN()};
        if (n_val > 0) {
            double vsum = 0.0;
            for (std::size_t i : val_idx)
                vsum += clip_loss_and_grads(spec, res.weights, clips[i], nullptr);
            rec.val_mse = vsum / (double)n_val;
        }
        res.history.push_back(rec);
    }
    return res;
}

inline void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "epoch,train_mse,val_mse\n";
    os.precision(17);
    for (const auto& r : history) {
        os << r.epoch << "," << r.train_mse << ",";
        if (std::isnan(r.val_mse))
            os << "";
        else
            os << r.val_mse;
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// Masked evaluation: MSE over masked pixels plus mean per-frame Pearson
// correlation between prediction and ground truth.

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("pearson: need >= 2 paired samples");
    const double n = (double)a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0)
        throw std::invalid_argument("pearson: zero variance in a sample");
    return sab / std::sqrt(saa * sbb);
}

struct EvalResult {
    double mse;
    double mean_pearson;
};

// clips: (1,H,W,T+1) frames; masks: one (H,W) binary mask per clip.
inline EvalResult evaluate(const ModelSpec& s, const ModelWeights& w,
                           const std::vector<Tensor>& clips, const std::vector<Tensor>& masks) {
    if (clips.empty() || clips.size() != masks.size())
        throw std::invalid_argument("evaluate: clips and masks must be non-empty and aligned");
    double err_sum = 0.0;
    std::size_t err_n = 0;
    double pearson_sum = 0.0;
    std::size_t pearson_n = 0;
    for (std::size_t ci = 0; ci < clips.size(); ++ci) {
        const Tensor& mask = masks[ci];
        const Tensor pred = model_forward(s, w, clip_model_input(s, clips[ci]));
        const Tensor tgt = clip_target(s, clips[ci]);
        const std::size_t H = tgt.dims[1], W = tgt.dims[2];
        if (mask.rank() != 2 || mask.dims[0] != H || mask.dims[1] != W)
            throw std::invalid_argument("evaluate: mask " + mask.shape_str() +
                                        " does not align with frame " + tgt.shape_str());
        const std::size_t F = s.kind == ModelKind::recurrent_autoencoder ? s.T : 1;
        for (std::size_t f = 0; f < F; ++f) {
            std::vector<double> pv, tv;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    if (mask.v[y * W + x] == 0.0) continue;
                    const double p = F == 1 ? pred.at(0, y, x) : pred.at(0, y, x, f);
                    const double t = F == 1 ? tgt.at(0, y, x) : tgt.at(0, y, x, f);
                    pv.push_back(p);
                    tv.push_back(t);
                }
            if (pv.size() < 2)
                throw std::invalid_argument("evaluate: fewer than 2 masked pixels in a frame");
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const double d = pv[i] - tv[i];
                err_sum += d * d;
            }
            err_n += pv.size();
            pearson_sum += pearson(pv, tv);
            ++pearson_n;
        }
    }
    return {err_sum / (double)err_n, pearson_sum / (double)pearson_n};
}

}  // namespace vx
