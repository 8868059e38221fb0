// Command-line driver: synthetic cohorts, model training, baseline and model
// scoring, and group statistics, each as one subcommand. Every run writes a
// run.json with the resolved arguments; `rerun` replays one.
//
// Exit codes: 0 success, 1 usage error, 2 data/computation error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vx/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int dispatch(const std::vector<std::string>& args);

std::string manifest_path(const std::string& data) {
    if (fs::is_directory(data)) return data + "/manifest.csv";
    return data;
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const std::vector<std::string>& argv) {
    json j{{"command", command}, {"argv", argv}};
    fs::create_directories(out_dir);
    std::ofstream os(out_dir + "/run.json");
    if (!os) throw std::runtime_error("cannot write " + out_dir + "/run.json");
    os << j.dump(2) << "\n";
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back((std::size_t)std::stoul(tok));
    return out;
}

// Clips from every listed subject, using each model's padding divisor.
std::vector<vx::SliceClip> cohort_clips(const std::vector<vx::VolumeSequence>& cohort,
                                        std::size_t T, std::size_t divisor) {
    std::vector<vx::SliceClip> clips;
    for (const auto& vol : cohort) {
        const auto windows = vx::segment_windows(vol.frames(), T);
        auto c = vx::extract_axial_clips(vol, windows, T, divisor);
        clips.insert(clips.end(), std::make_move_iterator(c.begin()),
                     std::make_move_iterator(c.end()));
    }
    return clips;
}

std::vector<vx::VolumeSequence> filter_group(std::vector<vx::VolumeSequence> cohort,
                                             const std::string& group) {
    if (group == "all") return cohort;
    const vx::Group g = vx::group_from_string(group);
    std::vector<vx::VolumeSequence> out;
    for (auto& v : cohort)
        if (v.group == g) out.push_back(std::move(v));
    return out;
}

void write_subject_scores(const std::vector<vx::SubjectScore>& scores,
                          const std::string& out_dir) {
    fs::create_directories(out_dir);
    vx::write_scores_csv(scores, out_dir + "/scores.csv");
    for (const auto& s : scores)
        vx::save_tensor(s.per_voxel_error, out_dir + "/" + s.subject_id + "_pve.vxt");
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::vector<std::string>& argv, const std::string& out,
              const vx::SynthConfig& cfg) {
    auto cohort = vx::synth_cohort(cfg);
    vx::save_cohort(cohort, out);
    write_run_json(out, "synth", argv);
    std::cout << "wrote " << cohort.size() << " subjects to " << out << "\n";
    return 0;
}

int cmd_train(const std::vector<std::string>& argv, const std::string& data,
              const std::string& out, const std::string& group, vx::ModelSpec spec,
              vx::TrainConfig tcfg, vx::AdamConfig adam, std::uint64_t init_seed) {
    spec.validate();
    auto cohort = filter_group(vx::load_cohort(manifest_path(data)), group);
    if (cohort.empty()) throw std::runtime_error("train: no subjects in group " + group);
    std::vector<vx::SliceClip> slice_clips =
        cohort_clips(cohort, spec.T, spec.spatial_divisor());
    if (slice_clips.empty()) throw std::runtime_error("train: no clips extracted");
    std::vector<vx::Tensor> clips;
    clips.reserve(slice_clips.size());
    for (auto& c : slice_clips) clips.push_back(std::move(c.frames));

    vx::TrainResult res = vx::train(spec, vx::build(spec, init_seed), clips, tcfg, adam);
    fs::create_directories(out);
    vx::save_weights(res.weights, spec, out + "/weights.vxw");
    vx::write_history_csv(res.history, out + "/history.csv");
    write_run_json(out, "train", argv);
    std::cout << "trained " << vx::to_string(spec.kind) << " on " << clips.size()
              << " clips; final train mse " << res.history.back().train_mse << "\n";
    return 0;
}

int cmd_score(const std::vector<std::string>& argv, const std::string& data,
              const std::string& weights_path, const std::string& out) {
    auto [spec, weights] = vx::load_weights(weights_path);
    auto cohort = vx::load_cohort(manifest_path(data));
    const auto mode = spec.kind == vx::ModelKind::recurrent_autoencoder
                          ? vx::ScoreMode::reconstruction
                          : vx::ScoreMode::next_frame;
    const auto predict = vx::model_predictor(spec, weights);
    std::vector<vx::SubjectScore> scores;
    for (const auto& vol : cohort)
        scores.push_back(vx::score_subject(predict, mode, vol, spec.T, spec.spatial_divisor()));
    write_subject_scores(scores, out);
    write_run_json(out, "score", argv);
    std::cout << "scored " << scores.size() << " subjects\n";
    return 0;
}

int cmd_baseline(const std::vector<std::string>& argv, const std::string& data,
                 const std::string& method, std::size_t T, const std::string& out) {
    const vx::BaselineMethod m = vx::baseline_from_string(method);
    auto cohort = vx::load_cohort(manifest_path(data));
    std::vector<vx::SubjectScore> scores;
    for (const auto& vol : cohort)
        scores.push_back(vx::score_subject_baseline(m, vol, T, 1));
    write_subject_scores(scores, out);
    write_run_json(out, "baseline", argv);
    std::cout << "scored " << scores.size() << " subjects with " << method << "\n";
    return 0;
}

int cmd_stats(const std::vector<std::string>& argv, const std::string& scores_path,
              const std::string& out, bool welch) {
    const auto pairs = vx::load_scores_csv(scores_path);
    std::vector<vx::SubjectScore> scores;
    for (const auto& [g, v] : pairs) {
        vx::SubjectScore s;
        s.group = g;
        s.mean_error = v;
        scores.push_back(std::move(s));
    }
    const vx::GroupReport rep = vx::group_compare(scores, welch);
    const json j = vx::report_to_json(rep);
    const fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << j.dump(2) << "\n";
    write_run_json(out_path.has_parent_path() ? out_path.parent_path().string() : ".",
                   "stats", argv);
    std::cout << "auc " << rep.auc << " t " << rep.t_stat << " p " << rep.p_value << "\n";
    return 0;
}

int cmd_regional(const std::vector<std::string>& argv, const std::string& data,
                 const std::string& errors_dir, const std::string& out, double q,
                 bool welch) {
    auto cohort = vx::load_cohort(manifest_path(data));
    if (cohort.empty()) throw std::runtime_error("regional: empty cohort");
    if (!cohort[0].atlas) throw std::runtime_error("regional: cohort has no atlas");

    std::vector<vx::SubjectScore> scores;
    for (const auto& vol : cohort) {
        vx::SubjectScore s;
        s.subject_id = vol.subject_id;
        s.group = vol.group;
        s.per_voxel_error = vx::load_tensor(errors_dir + "/" + vol.subject_id + "_pve.vxt");
        scores.push_back(std::move(s));
    }
    std::vector<std::size_t> excluded;
    const auto rows =
        vx::regional_analysis(scores, *cohort[0].atlas, cohort[0].mask, q, welch, &excluded);
    const fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    vx::write_regional_csv(rows, out);
    write_run_json(out_path.has_parent_path() ? out_path.parent_path().string() : ".",
                   "regional", argv);
    std::size_t passing = 0;
    for (const auto& r : rows)
        if (r.fdr_pass) ++passing;
    std::cout << rows.size() << " regions, " << passing << " pass FDR at q=" << q;
    if (!excluded.empty()) std::cout << "; " << excluded.size() << " excluded (no masked voxels)";
    std::cout << "\n";
    return 0;
}

// Full finite-difference suite over operators and the three architectures.
int cmd_gradcheck(std::uint64_t seed) {
    using namespace vx;
    std::mt19937_64 rng(seed);
    bool all_pass = true;
    auto report = [&](const std::string& name, bool pass, double err) {
        all_pass = all_pass && pass;
        std::cout << (pass ? "pass" : "FAIL") << "  " << name << "  max rel err " << err << "\n";
    };

    auto rand_tensor = [&](std::vector<std::size_t> dims) {
        Tensor t(std::move(dims));
        std::uniform_real_distribution<double> U(-1.0, 1.0);
        for (double& x : t.v) x = U(rng);
        return t;
    };

    {  // conv2d, kernel gradient through a scalar loss
        Tensor in = rand_tensor({2, 6, 6});
        ConvParams p{rand_tensor({3, 2, 3, 3}), rand_tensor({3}), Padding::same};
        auto f = [&](const Tensor& k) {
            ConvParams q{k, p.bias, p.padding};
            const Tensor out = conv2d(in, q);
            double s = 0.0;
            for (double x : out.v) s += x * x;
            return s;
        };
        const Tensor out = conv2d(in, p);
        Tensor gout = out;
        for (double& x : gout.v) x *= 2.0;
        const ConvGrads g = conv2d_backward(in, p, gout);
        const auto rep = grad_check(f, p.kernel, g.grad_kernel, 1e-4);
        report("conv2d kernel", rep.pass, rep.max_rel_err);
    }
    {  // conv3d input gradient
        Tensor in = rand_tensor({2, 4, 4, 3});
        ConvParams p{rand_tensor({2, 2, 3, 3, 1}), rand_tensor({2}), Padding::same};
        auto f = [&](const Tensor& x) {
            const Tensor out = conv3d(x, p);
            double s = 0.0;
            for (double v : out.v) s += v * v;
            return s;
        };
        const Tensor out = conv3d(in, p);
        Tensor gout = out;
        for (double& x : gout.v) x *= 2.0;
        const ConvGrads g = conv3d_backward(in, p, gout);
        const auto rep = grad_check(f, in, g.grad_input, 1e-4);
        report("conv3d input", rep.pass, rep.max_rel_err);
    }
    for (auto [act, name] : {std::pair{Activation::sigmoid, "sigmoid"},
                             {Activation::tanh, "tanh"},
                             {Activation::relu, "relu"}}) {
        Tensor in = rand_tensor({4, 5});
        auto f = [&](const Tensor& x) {
            const Tensor out = activate(x, act);
            double s = 0.0;
            for (double v : out.v) s += v * v;
            return s;
        };
        Tensor gout = activate(in, act);
        for (double& x : gout.v) x *= 2.0;
        const Tensor gin = activate_backward(in, act, gout);
        const auto rep = grad_check(f, in, gin, 1e-4);
        report(std::string("activation ") + name, rep.pass, rep.max_rel_err);
    }
    {  // ConvLSTM BPTT
        ConvLSTMParams p;
        for (int g = 0; g < 4; ++g) {
            p.wx[g] = rand_tensor({2, 1, 3, 3});
            p.wh[g] = rand_tensor({2, 2, 3, 3});
            p.bias[g] = rand_tensor({2});
        }
        std::vector<Tensor> xs;
        for (int t = 0; t < 3; ++t) xs.push_back(rand_tensor({1, 4, 4}));
        auto f = [&](const Tensor& w) {
            ConvLSTMParams q = p;
            q.wx[0] = w;
            const auto hs = forward_sequence(xs, q, ReturnMode::all);
            double s = 0.0;
            for (const auto& h : hs)
                for (double v : h.v) s += v * v;
            return s;
        };
        ConvLSTMSequenceCache cache;
        const auto hs = forward_sequence(xs, p, ReturnMode::all, &cache);
        std::vector<Tensor> ghs;
        for (const auto& h : hs) {
            Tensor g = h;
            for (double& x : g.v) x *= 2.0;
            ghs.push_back(std::move(g));
        }
        const ConvLSTMGrads grads = backward_sequence(xs, p, cache, ghs, ReturnMode::all);
        const auto rep = grad_check(f, p.wx[0], grads.grad_params.wx[0], 1e-4);
        report("convlstm wxi (BPTT)", rep.pass, rep.max_rel_err);
    }
    for (auto kind : {ModelKind::recurrent_unet, ModelKind::unet2d,
                      ModelKind::recurrent_autoencoder}) {
        ModelSpec s;
        s.kind = kind;
        s.levels = 2;
        s.channels = {2, 3};
        s.bottleneck_channels = 4;
        s.T = 3;
        ModelWeights w = build(s, seed + (std::uint64_t)kind);
        Tensor in = kind == ModelKind::unet2d ? rand_tensor({s.T, 8, 8})
                                              : rand_tensor({1, 8, 8, s.T});
        for (double& x : in.v) x = 0.5 + 0.5 * x;
        Tensor target = model_forward(s, w, in);
        for (double& x : target.v) x += 0.1;

        ModelCache cache;
        const Tensor pred = model_forward(s, w, in, &cache);
        auto [loss, gpred] = mse_loss(pred, target);
        (void)loss;
        const ModelWeights grads = model_backward(s, w, cache, gpred);

        double worst = 0.0;
        bool pass = true;
        ModelWeights wc = w;
        std::uint64_t salt = 0;
        for (const auto& [name, g] : grads.params) {
            auto f = [&](const Tensor& t) {
                Tensor saved = wc.at(name);
                wc.at(name) = t;
                const double v = mse_loss(model_forward(s, wc, in), target).first;
                wc.at(name) = saved;
                return v;
            };
            const auto rep = grad_check(f, w.at(name), g, 1e-4, 1e-5, 8, seed + salt++);
            pass = pass && rep.pass;
            worst = std::max(worst, rep.max_rel_err);
        }
        report(std::string("model ") + to_string(kind), pass, worst);
    }

    std::cout << (all_pass ? "gradient suite passed" : "gradient suite FAILED") << "\n";
    return all_pass ? 0 : 2;
}

int cmd_rerun(const std::string& run_path) {
    std::ifstream is(run_path);
    if (!is) throw std::runtime_error("rerun: cannot open " + run_path);
    json j;
    is >> j;
    const auto argv = j.at("argv").get<std::vector<std::string>>();
    return dispatch(argv);
}

// ---------------------------------------------------------------------------

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"spatiotemporal anomaly detection pipeline"};
    app.require_subcommand(1);
    std::size_t threads = 1;  // single-threaded; kept for interface stability
    app.add_option("--threads", threads, "worker thread count (deterministic reductions)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    std::string synth_out;
    vx::SynthConfig scfg;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--controls", scfg.n_control, "control subjects");
    synth->add_option("--patients", scfg.n_patient, "patient subjects");
    synth->add_option("--x", scfg.X, "volume X dim");
    synth->add_option("--y", scfg.Y, "volume Y dim");
    synth->add_option("--z", scfg.Z, "volume Z dim");
    synth->add_option("--frames", scfg.N, "time points per subject");
    synth->add_option("--seed", scfg.seed, "RNG seed");
    synth->add_option("--anomaly-strength", scfg.anomaly_strength, "patient perturbation scale");
    synth->add_option("--noise-sigma", scfg.noise_sigma, "additive noise sigma");

    // train
    auto* train = app.add_subcommand("train", "train a model on a cohort");
    std::string train_data, train_out, model_name = "recurrent_unet", group = "control";
    std::string channels_str = "16,32", hidden_str, skip_mode = "convlstm_last",
                out_act = "linear";
    vx::ModelSpec mspec;
    vx::TrainConfig tcfg;
    vx::AdamConfig adam;
    std::uint64_t init_seed = 0;
    double clip_norm = 5.0;
    bool no_clip = false, no_amsgrad = false;
    train->add_option("--data", train_data, "cohort directory or manifest.csv")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--model", model_name, "recurrent_unet|unet2d|autoencoder");
    train->add_option("--group", group, "training group: control|patient|all");
    train->add_option("--t", mspec.T, "input sequence length");
    train->add_option("--levels", mspec.levels, "encoder levels");
    train->add_option("--channels", channels_str, "comma-separated channels per level");
    train->add_option("--bottleneck", mspec.bottleneck_channels, "bottleneck channels");
    train->add_option("--hidden", hidden_str, "comma-separated ConvLSTM hidden sizes");
    train->add_option("--skip-mode", skip_mode, "convlstm_last|last_frame");
    train->add_option("--output-activation", out_act, "linear|sigmoid");
    train->add_option("--epochs", tcfg.epochs, "training epochs");
    train->add_option("--batch", tcfg.batch_size, "batch size");
    train->add_option("--lr", adam.lr, "learning rate");
    train->add_option("--val-split", tcfg.val_fraction, "validation fraction");
    train->add_option("--seed", tcfg.seed, "shuffle seed");
    train->add_option("--init-seed", init_seed, "weight init seed");
    train->add_option("--clip-norm", clip_norm, "global gradient-norm clip");
    train->add_flag("--no-clip", no_clip, "disable gradient clipping");
    train->add_flag("--no-amsgrad", no_amsgrad, "plain Adam without AMSGrad");

    // score
    auto* score = app.add_subcommand("score", "score subjects with trained weights");
    std::string score_data, score_weights, score_out;
    score->add_option("--data", score_data, "cohort directory or manifest.csv")->required();
    score->add_option("--weights", score_weights, "weights file")->required();
    score->add_option("--out", score_out, "output directory")->required();

    // baseline
    auto* baseline = app.add_subcommand("baseline", "score subjects with a baseline");
    std::string base_data, base_method = "copy", base_out;
    std::size_t base_t = 20;
    baseline->add_option("--data", base_data, "cohort directory or manifest.csv")->required();
    baseline->add_option("--method", base_method, "copy|extrapolate|interpolate");
    baseline->add_option("--t", base_t, "input sequence length");
    baseline->add_option("--out", base_out, "output directory")->required();

    // stats
    auto* stats = app.add_subcommand("stats", "group comparison from scores.csv");
    std::string stats_scores, stats_out = "report.json";
    bool stats_welch = false;
    stats->add_option("--scores", stats_scores, "scores.csv")->required();
    stats->add_option("--out", stats_out, "output report.json");
    stats->add_flag("--welch", stats_welch, "Welch t-test instead of pooled");

    // regional
    auto* regional = app.add_subcommand("regional", "per-region group analysis");
    std::string reg_data, reg_errors, reg_out = "regional.csv";
    double fdr_q = 0.05;
    bool reg_welch = false;
    regional->add_option("--data", reg_data, "cohort directory or manifest.csv")->required();
    regional->add_option("--errors", reg_errors, "directory with <id>_pve.vxt files")
        ->required();
    regional->add_option("--out", reg_out, "output regional.csv");
    regional->add_option("--fdr-q", fdr_q, "BH-FDR level");
    regional->add_flag("--welch", reg_welch, "Welch t-test instead of pooled");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::uint64_t gc_seed = 0;
    gradcheck->add_option("--seed", gc_seed, "RNG seed");

    // rerun
    auto* rerun = app.add_subcommand("rerun", "replay a previous run.json");
    std::string run_path;
    rerun->add_option("--run", run_path, "run.json path")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (*synth) return cmd_synth(args, synth_out, scfg);
    if (*train) {
        mspec.kind = model_name == "autoencoder"
                         ? vx::ModelKind::recurrent_autoencoder
                         : vx::model_kind_from_string(model_name);
        mspec.channels = parse_size_list(channels_str);
        if (!hidden_str.empty()) mspec.convlstm_hidden = parse_size_list(hidden_str);
        if (skip_mode != "convlstm_last" && skip_mode != "last_frame")
            throw std::runtime_error("unknown skip mode: " + skip_mode);
        mspec.skip_mode = skip_mode == "convlstm_last" ? vx::SkipMode::convlstm_last
                                                       : vx::SkipMode::last_frame;
        if (out_act != "linear" && out_act != "sigmoid")
            throw std::runtime_error("unknown output activation: " + out_act);
        mspec.output_activation =
            out_act == "linear" ? vx::Activation::linear : vx::Activation::sigmoid;
        adam.amsgrad = !no_amsgrad;
        if (no_clip)
            adam.grad_clip_norm.reset();
        else
            adam.grad_clip_norm = clip_norm;
        return cmd_train(args, train_data, train_out, group, mspec, tcfg, adam, init_seed);
    }
    if (*score) return cmd_score(args, score_data, score_weights, score_out);
    if (*baseline) return cmd_baseline(args, base_data, base_method, base_t, base_out);
    if (*stats) return cmd_stats(args, stats_scores, stats_out, stats_welch);
    if (*regional)
        return cmd_regional(args, reg_data, reg_errors, reg_out, fdr_q, reg_welch);
    if (*gradcheck) return cmd_gradcheck(gc_seed);
    if (*rerun) return cmd_rerun(run_path);
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return dispatch(args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
