#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "vx/tensor.hpp"

// Volume I/O and preprocessing: the "VXT1" binary tensor container, per-voxel
// min-max scaling, mask application, non-overlapping windowing, axial clip
// extraction, frame-wise displacement files, and a seeded synthetic cohort
// generator.

namespace vx {

enum class Group { control, patient };

inline std::string to_string(Group g) { return g == Group::control ? "control" : "patient"; }

inline Group group_from_string(const std::string& s) {
    if (s == "control") return Group::control;
    if (s == "patient") return Group::patient;
    throw std::invalid_argument("unknown group: " + s);
}

// One subject's 4-D scan (X,Y,Z,N) with mask and optional atlas/motion data.
struct VolumeSequence {
    std::string subject_id;
    Group group = Group::control;
    Tensor data;                         // (X,Y,Z,N), values in [0,1] after scaling
    Tensor mask;                         // (X,Y,Z) binary
    std::optional<Tensor> atlas;         // (X,Y,Z) non-negative region labels
    std::optional<std::vector<double>> fd;        // length N
    std::optional<std::vector<bool>> scrubbed;    // length N

    std::size_t frames() const { return data.dims[3]; }

    void validate() const {
        if (data.rank() != 4)
            throw std::invalid_argument("VolumeSequence: data must be 4-D, got " +
                                        data.shape_str());
        if (mask.rank() != 3 || mask.dims[0] != data.dims[0] || mask.dims[1] != data.dims[1] ||
            mask.dims[2] != data.dims[2])
            throw std::invalid_argument("VolumeSequence: mask " + mask.shape_str() +
                                        " does not align with data " + data.shape_str());
        for (double m : mask.v)
            if (m != 0.0 && m != 1.0)
                throw std::invalid_argument("VolumeSequence: mask must be binary");
        if (fd && fd->size() != frames())
            throw std::invalid_argument("VolumeSequence: fd length " +
                                        std::to_string(fd->size()) + " != N " +
                                        std::to_string(frames()));
    }
};

// ---------------------------------------------------------------------------
// VXT tensor file: "VXT1" | u8 dtype (0=f64,1=u8,2=i32) | u8 ndim |
// 2 reserved bytes | ndim x u32 LE dims | payload (LE, C order).

enum class VxtDtype : std::uint8_t { f64 = 0, u8 = 1, i32 = 2 };

inline void save_tensor(const Tensor& t, const std::string& path,
                        VxtDtype dtype = VxtDtype::f64) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
    os.write("VXT1", 4);
    const std::uint8_t dt = (std::uint8_t)dtype, nd = (std::uint8_t)t.rank();
    os.put((char)dt);
    os.put((char)nd);
    os.put(0);
    os.put(0);
    for (std::size_t d : t.dims) {
        const std::uint32_t x = (std::uint32_t)d;
        unsigned char b[4] = {(unsigned char)(x & 0xff), (unsigned char)((x >> 8) & 0xff),
                              (unsigned char)((x >> 16) & 0xff),
                              (unsigned char)((x >> 24) & 0xff)};
        os.write((const char*)b, 4);
    }
    switch (dtype) {
        case VxtDtype::f64:
            os.write((const char*)t.v.data(), (std::streamsize)(t.v.size() * sizeof(double)));
            break;
        case VxtDtype::u8:
            for (double x : t.v) os.put((char)(std::uint8_t)x);
            break;
        case VxtDtype::i32:
            for (double x : t.v) {
                const std::int32_t i = (std::int32_t)x;
                os.write((const char*)&i, 4);
            }
            break;
    }
    if (!os) throw std::runtime_error("save_tensor: write failed for " + path);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "VXT1")
        throw std::runtime_error("load_tensor: bad magic at byte 0 in " + path);
    const int dt = is.get(), nd = is.get();
    is.get();
    is.get();
    if (!is) throw std::runtime_error("load_tensor: truncated header (byte offset 4) in " + path);
    if (dt < 0 || dt > 2)
        throw std::runtime_error("load_tensor: unknown dtype " + std::to_string(dt) +
                                 " at byte 4 in " + path);
    if (nd < 1 || nd > 8)
        throw std::runtime_error("load_tensor: implausible ndim " + std::to_string(nd) +
                                 " at byte 5 in " + path);
    std::vector<std::size_t> dims((std::size_t)nd);
    for (auto& d : dims) {
        unsigned char b[4];
        if (!is.read((char*)b, 4)) throw std::runtime_error("load_tensor: truncated dims in " + path);
        d = (std::size_t)b[0] | ((std::size_t)b[1] << 8) | ((std::size_t)b[2] << 16) |
            ((std::size_t)b[3] << 24);
        if (d == 0 || d > (1u << 24))
            throw std::runtime_error("load_tensor: dim overflow (" + std::to_string(d) + ") in " +
                                     path);
    }
    Tensor t(dims);
    const std::size_t n = t.numel();
    switch ((VxtDtype)dt) {
        case VxtDtype::f64:
            if (!is.read((char*)t.v.data(), (std::streamsize)(n * sizeof(double))))
                throw std::runtime_error("load_tensor: truncated payload in " + path +
                                         ", expected " + std::to_string(n * sizeof(double)) +
                                         " payload bytes");
            break;
        case VxtDtype::u8:
            for (std::size_t i = 0; i < n; ++i) {
                const int c = is.get();
                if (c < 0)
                    throw std::runtime_error("load_tensor: truncated payload in " + path +
                                             ", expected " + std::to_string(n) + " payload bytes");
                t.v[i] = (double)c;
            }
            break;
        case VxtDtype::i32:
            for (std::size_t i = 0; i < n; ++i) {
                std::int32_t x;
                if (!is.read((char*)&x, 4))
                    throw std::runtime_error("load_tensor: truncated payload in " + path +
                                             ", expected " + std::to_string(4 * n) +
                                             " payload bytes");
                t.v[i] = (double)x;
            }
            break;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Preprocessing

// Per-voxel min-max scaling to [0,1]; constant voxels map to 0.
inline void minmax_scale(VolumeSequence& vol) {
    const std::size_t N = vol.frames();
    const std::size_t voxels = vol.data.numel() / N;
    for (std::size_t p = 0; p < voxels; ++p) {
        double lo = vol.data.v[p * N], hi = lo;
        for (std::size_t t = 1; t < N; ++t) {
            lo = std::min(lo, vol.data.v[p * N + t]);
            hi = std::max(hi, vol.data.v[p * N + t]);
        }
        if (hi == lo) {
            for (std::size_t t = 0; t < N; ++t) vol.data.v[p * N + t] = 0.0;
        } else {
            // Divide rather than multiply by a reciprocal so the max maps to
            // exactly 1 and rescaling already-scaled data is a no-op.
            const double range = hi - lo;
            for (std::size_t t = 0; t < N; ++t)
                vol.data.v[p * N + t] = (vol.data.v[p * N + t] - lo) / range;
        }
    }
}

inline void apply_mask(VolumeSequence& vol) {
    vol.validate();
    const std::size_t N = vol.frames();
    for (std::size_t p = 0; p < vol.mask.numel(); ++p)
        if (vol.mask.v[p] == 0.0)
            for (std::size_t t = 0; t < N; ++t) vol.data.v[p * N + t] = 0.0;
}

// ---------------------------------------------------------------------------
// Windowing & clip extraction

struct WindowRange {
    std::size_t begin;  // first frame
    std::size_t end;    // one past last frame; end - begin == T+1
};

// floor(N/(T+1)) consecutive disjoint (T+1)-frame windows from frame 0.
inline std::vector<WindowRange> segment_windows(std::size_t n_frames, std::size_t T) {
    std::vector<WindowRange> w;
    const std::size_t len = T + 1;
    for (std::size_t b = 0; b + len <= n_frames; b += len) w.push_back({b, b + len});
    return w;
}

struct SliceClip {
    std::string subject_id;
    std::size_t z_index = 0;
    std::size_t window_index = 0;
    Tensor frames;      // (1,H,W,T+1), zero-padded to the model's grid
    Tensor mask_slice;  // (H,W)
};

inline std::size_t pad_to_multiple(std::size_t x, std::size_t m) {
    return (x + m - 1) / m * m;
}

// One clip per (window, axial slice); slices are symmetrically zero-padded to
// the next multiple of `divisor`, and slices with an all-zero mask are
// dropped.
inline std::vector<SliceClip> extract_axial_clips(const VolumeSequence& vol,
                                                  const std::vector<WindowRange>& windows,
                                                  std::size_t T, std::size_t divisor) {
    vol.validate();
    const std::size_t X = vol.data.dims[0], Y = vol.data.dims[1], Z = vol.data.dims[2],
                      N = vol.data.dims[3];
    const std::size_t H = pad_to_multiple(X, divisor), W = pad_to_multiple(Y, divisor);
    const std::size_t oy = (H - X) / 2, ox = (W - Y) / 2;
    std::vector<SliceClip> clips;
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
        const WindowRange& win = windows[wi];
        if (win.end > N || win.end - win.begin != T + 1)
            throw std::invalid_argument("extract_axial_clips: invalid window");
        for (std::size_t z = 0; z < Z; ++z) {
            Tensor mask_slice({H, W});
            bool any = false;
            for (std::size_t x = 0; x < X; ++x)
                for (std::size_t y = 0; y < Y; ++y) {
                    const double m = vol.mask.at(x, y, z);
                    mask_slice.v[(x + oy) * W + (y + ox)] = m;
                    any = any || m != 0.0;
                }
            if (!any) continue;
            SliceClip clip{vol.subject_id, z, wi, Tensor({1, H, W, T + 1}),
                           std::move(mask_slice)};
            for (std::size_t x = 0; x < X; ++x)
                for (std::size_t y = 0; y < Y; ++y)
                    for (std::size_t t = 0; t < T + 1; ++t)
                        clip.frames.at(0, x + oy, y + ox, t) =
                            vol.data.at(x, y, z, win.begin + t);
            clips.push_back(std::move(clip));
        }
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Frame-wise displacement files: one float per line.

inline std::vector<double> load_fd(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_fd: cannot open " + path);
    std::vector<double> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::size_t pos = 0;
        double x;
        try {
            x = std::stod(line, &pos);
        } catch (const std::exception&) {
            throw std::runtime_error("load_fd: non-numeric value on line " +
                                     std::to_string(lineno) + " of " + path);
        }
        while (pos < line.size() && std::isspace((unsigned char)line[pos])) ++pos;
        if (pos != line.size())
            throw std::runtime_error("load_fd: non-numeric value on line " +
                                     std::to_string(lineno) + " of " + path);
        out.push_back(x);
    }
    return out;
}

inline void save_fd(const std::vector<double>& fd, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_fd: cannot open " + path);
    os.precision(17);
    for (double x : fd) os << x << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic cohort generator: a desk-scale stand-in for real rs-fMRI data.
// Healthy dynamics are seeded Gaussian spatial blobs times band-limited
// temporal signals plus noise; patients get high-frequency noise and phase
// scrambling injected into a fixed subset of atlas regions.

struct SynthConfig {
    std::size_t n_control = 8;
    std::size_t n_patient = 8;
    std::size_t X = 16, Y = 16, Z = 4;
    std::size_t N = 64;  // frames
    std::uint64_t seed = 0;
    double anomaly_strength = 1.0;
    std::size_t n_blobs = 8;
    double noise_sigma = 0.02;
    std::size_t atlas_regions_per_axis = 2;  // block parcellation
    // region ids (block index) perturbed in patients; defaults set in synth_cohort
    std::vector<std::size_t> anomaly_regions = {1, 6};
};

namespace detail {

// Block atlas: regions are a regular grid of blocks, labelled from 1.
inline Tensor block_atlas(std::size_t X, std::size_t Y, std::size_t Z, std::size_t per_axis) {
    Tensor atlas({X, Y, Z});
    for (std::size_t x = 0; x < X; ++x)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t z = 0; z < Z; ++z) {
                const std::size_t bx = std::min(per_axis - 1, x * per_axis / X);
                const std::size_t by = std::min(per_axis - 1, y * per_axis / Y);
                const std::size_t bz = std::min(per_axis - 1, z * per_axis / Z);
                atlas.at(x, y, z) = (double)(1 + (bx * per_axis + by) * per_axis + bz);
            }
    return atlas;
}

inline Tensor ellipsoid_mask(std::size_t X, std::size_t Y, std::size_t Z) {
    Tensor mask({X, Y, Z});
    const double cx = (double)(X - 1) / 2.0, cy = (double)(Y - 1) / 2.0,
                 cz = (double)(Z - 1) / 2.0;
    const double rx = (double)X / 2.0, ry = (double)Y / 2.0, rz = (double)Z / 2.0 + 0.5;
    for (std::size_t x = 0; x < X; ++x)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t z = 0; z < Z; ++z) {
                const double dx = ((double)x - cx) / rx, dy = ((double)y - cy) / ry,
                             dz = ((double)z - cz) / rz;
                mask.at(x, y, z) = dx * dx + dy * dy + dz * dz <= 1.0 ? 1.0 : 0.0;
            }
    return mask;
}

}  // namespace detail

inline std::vector<VolumeSequence> synth_cohort(const SynthConfig& cfg) {
    if (cfg.X == 0 || cfg.Y == 0 || cfg.Z == 0 || cfg.N == 0)
        throw std::invalid_argument("synth_cohort: dims must be positive");
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const Tensor mask = detail::ellipsoid_mask(cfg.X, cfg.Y, cfg.Z);
    const Tensor atlas = detail::block_atlas(cfg.X, cfg.Y, cfg.Z, cfg.atlas_regions_per_axis);

    std::vector<VolumeSequence> cohort;
    const std::size_t total = cfg.n_control + cfg.n_patient;
    for (std::size_t s = 0; s < total; ++s) {
        const bool patient = s >= cfg.n_control;
        VolumeSequence vol;
        vol.subject_id = (patient ? "pat" : "ctl") + std::to_string(patient ? s - cfg.n_control : s);
        vol.group = patient ? Group::patient : Group::control;
        vol.mask = mask;
        vol.atlas = atlas;
        vol.data = Tensor({cfg.X, cfg.Y, cfg.Z, cfg.N});

        // Gaussian spatial blobs x band-limited temporal signals.
        struct Blob {
            double cx, cy, cz, sigma;
            std::vector<double> signal;
        };
        std::vector<Blob> blobs(cfg.n_blobs);
        for (auto& b : blobs) {
            b.cx = unif(rng) * (double)(cfg.X - 1);
            b.cy = unif(rng) * (double)(cfg.Y - 1);
            b.cz = unif(rng) * (double)(cfg.Z - 1);
            b.sigma = 0.25 * (double)std::max(cfg.X, cfg.Y) * (0.75 + 0.5 * unif(rng));
            // sum of two sinusoids, periods >= 8 frames, random phases
            const double p1 = 8.0 + 8.0 * unif(rng), p2 = 16.0 + 16.0 * unif(rng);
            const double ph1 = 2.0 * M_PI * unif(rng), ph2 = 2.0 * M_PI * unif(rng);
            const double a2 = 0.3 + 0.4 * unif(rng);
            b.signal.resize(cfg.N);
            for (std::size_t t = 0; t < cfg.N; ++t)
                b.signal[t] = std::sin(2.0 * M_PI * (double)t / p1 + ph1) +
                              a2 * std::sin(2.0 * M_PI * (double)t / p2 + ph2);
        }

        for (std::size_t x = 0; x < cfg.X; ++x)
            for (std::size_t y = 0; y < cfg.Y; ++y)
                for (std::size_t z = 0; z < cfg.Z; ++z) {
                    double wsum = 0.0;
                    std::vector<double> wts(blobs.size());
                    for (std::size_t bi = 0; bi < blobs.size(); ++bi) {
                        const Blob& b = blobs[bi];
                        const double d2 = ((double)x - b.cx) * ((double)x - b.cx) +
                                          ((double)y - b.cy) * ((double)y - b.cy) +
                                          ((double)z - b.cz) * ((double)z - b.cz) * 4.0;
                        wts[bi] = std::exp(-d2 / (2.0 * b.sigma * b.sigma));
                        wsum += wts[bi];
                    }
                    for (std::size_t t = 0; t < cfg.N; ++t) {
                        double v = 0.0;
                        for (std::size_t bi = 0; bi < blobs.size(); ++bi)
                            v += wts[bi] * blobs[bi].signal[t];
                        // keep the deterministic signal dominant over noise
                        if (wsum > 0.0) v /= wsum;
                        vol.data.at(x, y, z, t) = v + cfg.noise_sigma * gauss(rng);
                    }
                }

        // Patient perturbation: high-frequency temporal noise plus phase
        // scrambling inside the designated atlas regions.
        // The generator consumes RNG draws identically for both groups so an
        // anomaly_strength of 0 leaves groups statistically interchangeable.
        {
            std::vector<double> hf(cfg.N);
            const double php = 2.0 * M_PI * unif(rng);
            for (std::size_t t = 0; t < cfg.N; ++t)
                hf[t] = std::sin(M_PI * (double)t + php) * 0.5 +
                        0.5 * std::sin(2.0 * M_PI * (double)t / 2.3 + 2.0 * php);
            const double scale = patient ? cfg.anomaly_strength : 0.0;
            if (scale > 0.0) {
                for (std::size_t x = 0; x < cfg.X; ++x)
                    for (std::size_t y = 0; y < cfg.Y; ++y)
                        for (std::size_t z = 0; z < cfg.Z; ++z) {
                            const std::size_t region = (std::size_t)atlas.at(x, y, z);
                            const bool hit =
                                std::find(cfg.anomaly_regions.begin(), cfg.anomaly_regions.end(),
                                          region) != cfg.anomaly_regions.end();
                            if (!hit || mask.at(x, y, z) == 0.0) continue;
                            // phase scrambling: reverse the series, blended in
                            for (std::size_t t = 0; t < cfg.N / 2; ++t) {
                                double& a = vol.data.at(x, y, z, t);
                                double& b = vol.data.at(x, y, z, cfg.N - 1 - t);
                                const double na = a + scale * 0.5 * (b - a);
                                const double nb = b + scale * 0.5 * (a - b);
                                a = na;
                                b = nb;
                            }
                            for (std::size_t t = 0; t < cfg.N; ++t)
                                vol.data.at(x, y, z, t) += scale * 0.35 * hf[t];
                        }
            }
        }

        minmax_scale(vol);
        apply_mask(vol);

        // Synthetic frame-wise displacement with occasional spikes.
        std::vector<double> fd(cfg.N);
        std::vector<bool> scrubbed(cfg.N, false);
        for (std::size_t t = 0; t < cfg.N; ++t) {
            fd[t] = 0.05 + 0.03 * std::abs(gauss(rng));
            if (unif(rng) < 0.05) {
                fd[t] += 0.5 + 0.5 * unif(rng);
                scrubbed[t] = true;
            }
        }
        vol.fd = fd;
        vol.scrubbed = scrubbed;
        vol.validate();
        cohort.push_back(std::move(vol));
    }
    return cohort;
}

// ---------------------------------------------------------------------------
// Cohort manifest CSV: subject_id, group, data_path, mask_path, atlas_path
// (optional), fd_path (optional). Paths are relative to the manifest's
// directory.

struct ManifestEntry {
    std::string subject_id;
    Group group;
    std::string data_path, mask_path, atlas_path, fd_path;  // optional ones may be empty
};

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (cols.size() < 4)
            throw std::runtime_error("load_manifest: need >= 4 columns, got " +
                                     std::to_string(cols.size()) + " in: " + line);
        ManifestEntry e;
        e.subject_id = cols[0];
        e.group = group_from_string(cols[1]);
        e.data_path = cols[2];
        e.mask_path = cols[3];
        if (cols.size() > 4) e.atlas_path = cols[4];
        if (cols.size() > 5) e.fd_path = cols[5];
        out.push_back(std::move(e));
    }
    return out;
}

inline void save_cohort(const std::vector<VolumeSequence>& cohort, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf(dir + "/manifest.csv");
    if (!mf) throw std::runtime_error("save_cohort: cannot open manifest in " + dir);
    mf << "subject_id,group,data_path,mask_path,atlas_path,fd_path\n";
    for (const auto& vol : cohort) {
        const std::string base = vol.subject_id;
        save_tensor(vol.data, dir + "/" + base + "_data.vxt");
        save_tensor(vol.mask, dir + "/" + base + "_mask.vxt", VxtDtype::u8);
        std::string atlas_path, fd_path;
        if (vol.atlas) {
            atlas_path = base + "_atlas.vxt";
            save_tensor(*vol.atlas, dir + "/" + atlas_path, VxtDtype::i32);
        }
        if (vol.fd) {
            fd_path = base + "_fd.txt";
            save_fd(*vol.fd, dir + "/" + fd_path);
        }
        mf << vol.subject_id << "," << to_string(vol.group) << "," << base << "_data.vxt,"
           << base << "_mask.vxt," << atlas_path << "," << fd_path << "\n";
    }
}

inline std::vector<VolumeSequence> load_cohort(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(manifest_path).parent_path();
    std::vector<VolumeSequence> cohort;
    for (const auto& e : load_manifest(manifest_path)) {
        VolumeSequence vol;
        vol.subject_id = e.subject_id;
        vol.group = e.group;
        vol.data = load_tensor((dir / e.data_path).string());
        vol.mask = load_tensor((dir / e.mask_path).string());
        if (!e.atlas_path.empty()) vol.atlas = load_tensor((dir / e.atlas_path).string());
        if (!e.fd_path.empty()) vol.fd = load_fd((dir / e.fd_path).string());
        vol.validate();
        cohort.push_back(std::move(vol));
    }
    return cohort;
}

}  // namespace vx
