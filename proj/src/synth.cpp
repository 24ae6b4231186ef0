#include "fedskel/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <queue>
#include <random>

#include <nlohmann/json.hpp>

#include "fedskel/errors.hpp"

namespace fedskel {

namespace {

constexpr uint64_t kFormatVersion = 1;
constexpr int kDrivers = 3;
constexpr float kIdleAmplitude = 0.1f;

std::mt19937_64 stream_rng(std::initializer_list<uint64_t> words) {
    std::vector<uint32_t> seq;
    for (uint64_t w : words) {
        seq.push_back(static_cast<uint32_t>(w));
        seq.push_back(static_cast<uint32_t>(w >> 32));
    }
    std::seed_seq ss(seq.begin(), seq.end());
    return std::mt19937_64(ss);
}

struct Fnv {
    uint64_t h = 1469598103934665603ull;
    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    }
    template <typename T>
    void value(T v) {
        bytes(&v, sizeof(v));
    }
};

struct Vec3 {
    float x = 0, y = 0, z = 0;
};

Vec3 random_direction(std::mt19937_64& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    Vec3 v{n(rng), n(rng), n(rng)};
    const float len = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z) + 1e-12f;
    return {v.x / len, v.y / len, v.z / len};
}

struct Driver {
    int joint;
    Vec3 amplitude;
    float frequency;
    float phase;
};

// One motion pattern per global class id.
std::vector<Driver> archetype(uint64_t seed, int label, int joints, int root) {
    auto rng = stream_rng({seed, 0xA5, static_cast<uint64_t>(label)});
    std::vector<int> candidates;
    for (int j = 0; j < joints; ++j)
        if (j != root) candidates.push_back(j);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    std::uniform_real_distribution<float> mag(0.6f, 1.2f), ph(0.0f, 2.0f * std::numbers::pi_v<float>);
    const float freqs[] = {1.0f, 1.5f, 2.0f};
    std::vector<Driver> out;
    for (int d = 0; d < kDrivers && d < static_cast<int>(candidates.size()); ++d) {
        Vec3 dir = random_direction(rng);
        const float m = mag(rng);
        out.push_back({candidates[d], {dir.x * m, dir.y * m, dir.z * m}, freqs[rng() % 3], ph(rng)});
    }
    return out;
}

std::vector<int> bfs_order(const std::vector<int>& parents, int root) {
    std::vector<std::vector<int>> kids(parents.size());
    for (size_t j = 0; j < parents.size(); ++j)
        if (parents[j] >= 0) kids[parents[j]].push_back(static_cast<int>(j));
    std::vector<int> order{root};
    for (size_t i = 0; i < order.size(); ++i)
        for (int k : kids[order[i]]) order.push_back(k);
    return order;
}

}  // namespace

ScaleProfile parse_scale_profile(const std::string& name) {
    if (name == "balanced") return ScaleProfile::Balanced;
    if (name == "skewed") return ScaleProfile::Skewed;
    throw ConfigError("unknown scale profile '" + name + "' (expected balanced or skewed)");
}

const char* scale_profile_name(ScaleProfile profile) {
    return profile == ScaleProfile::Balanced ? "balanced" : "skewed";
}

int ClientDatasetSpec::train_per_class() const {
    return std::clamp(static_cast<int>(std::lround(train_fraction * samples_per_class)), 1, samples_per_class - 1);
}

int ClientDatasetSpec::test_per_class() const { return samples_per_class - train_per_class(); }

uint64_t ClientDatasetSpec::hash() const {
    Fnv f;
    f.value(kFormatVersion);
    f.value(client);
    f.value(labels.size());
    for (int l : labels) f.value(l);
    f.value(samples_per_class);
    f.value(train_fraction);
    f.value(rewire);
    f.value(sigma);
    f.value(frames);
    f.value(channels);
    f.value(skeleton.joints);
    f.value(skeleton.root);
    for (auto [a, b] : skeleton.canonical_edges()) {
        f.value(a);
        f.value(b);
    }
    f.value(seed);
    return f.h;
}

Tensor Dataset::gather(const std::vector<int64_t>& rows) const {
    Shape s = x.shape();
    const int64_t row = x.numel() / s[0];
    s[0] = static_cast<int64_t>(rows.size());
    std::vector<float> out(static_cast<size_t>(s[0] * row));
    const float* src = x.data().data();
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src + rows[i] * row, row, out.begin() + static_cast<int64_t>(i) * row);
    }
    return Tensor::from(std::move(s), std::move(out));
}

std::vector<int> Dataset::gather_labels(const std::vector<int64_t>& rows) const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (int64_t r : rows) out.push_back(labels[static_cast<size_t>(r)]);
    return out;
}

std::vector<int> client_tree(const SkeletonGraph& skeleton, int rewire, uint64_t seed) {
    skeleton.validate();
    const int v = skeleton.joints;
    const auto dist = skeleton.hop_distance();
    std::vector<int> parents(static_cast<size_t>(v), -1);
    for (auto [a, b] : skeleton.canonical_edges()) {
        if (dist[a] + 1 == dist[b] && parents[b] < 0) parents[b] = a;
        else if (dist[b] + 1 == dist[a] && parents[a] < 0) parents[a] = b;
    }
    auto rng = stream_rng({seed, 0x7E});
    auto in_subtree = [&](int node, int top) {
        for (int j = node; j >= 0; j = parents[j])
            if (j == top) return true;
        return false;
    };
    for (int e = 0; e < rewire; ++e) {
        std::vector<int> movable;
        for (int j = 0; j < v; ++j)
            if (j != skeleton.root) movable.push_back(j);
        if (movable.empty()) break;
        const int j = movable[rng() % movable.size()];
        std::vector<int> targets;
        for (int p = 0; p < v; ++p)
            if (p != parents[j] && !in_subtree(p, j)) targets.push_back(p);
        if (targets.empty()) continue;
        parents[j] = targets[rng() % targets.size()];
    }
    return parents;
}

ClientData generate(const ClientDatasetSpec& spec) {
    const SkeletonGraph& g = spec.skeleton;
    const int v = g.joints, t_len = spec.frames, c_len = spec.channels;
    if (spec.samples_per_class < 2) throw DataError("samples_per_class must be at least 2");
    if (c_len < 1 || c_len > 3) throw DataError("synthetic skeletons carry 1 to 3 coordinates per joint");
    if (spec.labels.empty()) throw DataError("client " + std::to_string(spec.client) + " has no labels");

    ClientData out;
    out.spec = spec;
    out.parents = client_tree(g, spec.rewire, spec.seed ^ (0x9E3779B97F4A7C15ull * (spec.client + 1)));
    const auto order = bfs_order(out.parents, g.root);

    auto body = stream_rng({spec.seed, 0xB0, static_cast<uint64_t>(spec.client)});
    std::uniform_real_distribution<float> bone(0.3f, 0.8f), ph(0.0f, 2.0f * std::numbers::pi_v<float>);
    std::vector<Vec3> offset(static_cast<size_t>(v));
    std::vector<float> idle_phase(static_cast<size_t>(v));
    std::vector<Vec3> idle_dir(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) {
        const Vec3 d = random_direction(body);
        const float len = j == g.root ? 0.0f : bone(body);
        offset[j] = {d.x * len, d.y * len, d.z * len};
        idle_phase[j] = ph(body);
        idle_dir[j] = random_direction(body);
    }

    std::vector<std::vector<Driver>> classes;
    for (int label : spec.labels) classes.push_back(archetype(spec.seed, label, v, g.root));

    const int64_t frame = static_cast<int64_t>(c_len) * t_len * v;
    auto make_split = [&](int split, int per_class) {
        Dataset ds;
        const int k = static_cast<int>(spec.labels.size());
        std::vector<float> xs(static_cast<size_t>(frame * per_class * k));
        std::vector<Vec3> local(static_cast<size_t>(v)), pos(static_cast<size_t>(v));
        std::vector<double> seq(static_cast<size_t>(frame));
        for (int c = 0; c < k; ++c) {
            for (int i = 0; i < per_class; ++i) {
                const int64_t index = static_cast<int64_t>(c) * per_class + i;
                auto rng = stream_rng({spec.seed, static_cast<uint64_t>(spec.client), static_cast<uint64_t>(split),
                                       static_cast<uint64_t>(index)});
                std::uniform_real_distribution<float> shift(-0.6f, 0.6f), amp(0.75f, 1.25f), tempo(0.85f, 1.15f);
                std::normal_distribution<float> jitter(0.0f, 0.2f), noise(0.0f, spec.sigma);
                const float delta = shift(rng), scale = amp(rng), tau = tempo(rng);
                std::vector<float> driver_jitter;
                for (size_t d = 0; d < classes[c].size(); ++d) driver_jitter.push_back(jitter(rng));

                for (int tt = 0; tt < t_len; ++tt) {
                    const float u = 2.0f * std::numbers::pi_v<float> * tau * static_cast<float>(tt) / t_len;
                    for (int j = 0; j < v; ++j) {
                        const float s = kIdleAmplitude * std::sin(u + idle_phase[j]);
                        local[j] = {offset[j].x + s * idle_dir[j].x, offset[j].y + s * idle_dir[j].y,
                                    offset[j].z + s * idle_dir[j].z};
                    }
                    for (size_t d = 0; d < classes[c].size(); ++d) {
                        const Driver& dr = classes[c][d];
                        const float s = scale * std::sin(dr.frequency * u + dr.phase + delta + driver_jitter[d]);
                        local[dr.joint].x += s * dr.amplitude.x;
                        local[dr.joint].y += s * dr.amplitude.y;
                        local[dr.joint].z += s * dr.amplitude.z;
                    }
                    for (int j : order) {
                        const int p = out.parents[j];
                        pos[j] = p < 0 ? local[j]
                                       : Vec3{pos[p].x + local[j].x, pos[p].y + local[j].y, pos[p].z + local[j].z};
                    }
                    for (int j = 0; j < v; ++j) {
                        const float coords[3] = {pos[j].x, pos[j].y, pos[j].z};
                        for (int ch = 0; ch < c_len; ++ch) seq[(ch * t_len + tt) * v + j] = coords[ch] + noise(rng);
                    }
                }
                // per-sequence zero mean per coordinate, unit overall spread
                double sq = 0.0;
                const int64_t plane = static_cast<int64_t>(t_len) * v;
                for (int ch = 0; ch < c_len; ++ch) {
                    double m = 0.0;
                    for (int64_t q = 0; q < plane; ++q) m += seq[ch * plane + q];
                    m /= static_cast<double>(plane);
                    for (int64_t q = 0; q < plane; ++q) {
                        seq[ch * plane + q] -= m;
                        sq += seq[ch * plane + q] * seq[ch * plane + q];
                    }
                }
                const double inv = 1.0 / (std::sqrt(sq / static_cast<double>(frame)) + 1e-6);
                float* dst = xs.data() + index * frame;
                for (int64_t q = 0; q < frame; ++q) {
                    dst[q] = static_cast<float>(std::clamp(seq[q] * inv, -3.0, 3.0));
                }
                ds.labels.push_back(c);
            }
        }
        ds.x = Tensor::from({static_cast<int64_t>(ds.labels.size()), c_len, t_len, v}, std::move(xs));
        return ds;
    };
    out.train = make_split(0, spec.train_per_class());
    out.test = make_split(1, spec.test_per_class());
    return out;
}

std::vector<ClientDatasetSpec> make_federation_suite(int n_clients, ScaleProfile profile, uint64_t seed,
                                                     const SuiteOptions& options, bool with_unseen) {
    if (n_clients < 2) throw ConfigError("a federation needs at least 2 clients, got " + std::to_string(n_clients));
    if (options.classes_per_client < 2) throw ConfigError("classes_per_client must be at least 2");
    if (options.base_samples < 2 * options.classes_per_client) {
        throw ConfigError("base_samples " + std::to_string(options.base_samples) + " gives fewer than 2 samples per class");
    }
    if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0)) {
        throw ConfigError("train_fraction must lie in (0, 1)");
    }
    if (options.sigma < 0.0f) throw ConfigError("sigma must be nonnegative");
    if (options.rewire < 0) throw ConfigError("rewire must be nonnegative");
    options.skeleton.validate();

    std::vector<ClientDatasetSpec> specs;
    const int total = n_clients + (with_unseen ? 1 : 0);
    for (int i = 0; i < total; ++i) {
        ClientDatasetSpec s;
        s.client = i;
        for (int c = 0; c < options.classes_per_client; ++c) s.labels.push_back(i * options.classes_per_client + c);
        int n = options.base_samples;
        if (profile == ScaleProfile::Skewed && i < n_clients) n = options.base_samples << (n_clients - 1 - i);
        s.samples_per_class = n / options.classes_per_client;
        s.train_fraction = options.train_fraction;
        s.rewire = options.rewire;
        s.sigma = options.sigma;
        s.frames = options.frames;
        s.channels = options.channels;
        s.skeleton = options.skeleton;
        s.seed = seed;
        specs.push_back(std::move(s));
    }
    return specs;
}

// ---- cache ----------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "cache files are little-endian");

void write_dataset(std::ofstream& f, const Dataset& d) {
    f.write(reinterpret_cast<const char*>(d.x.data().data()), static_cast<std::streamsize>(d.x.numel() * 4));
    std::vector<int32_t> l(d.labels.begin(), d.labels.end());
    f.write(reinterpret_cast<const char*>(l.data()), static_cast<std::streamsize>(l.size() * 4));
}

bool read_dataset(std::ifstream& f, Shape shape, Dataset& d) {
    std::vector<float> x(static_cast<size_t>(shape_numel(shape)));
    std::vector<int32_t> l(static_cast<size_t>(shape[0]));
    f.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(x.size() * 4));
    f.read(reinterpret_cast<char*>(l.data()), static_cast<std::streamsize>(l.size() * 4));
    if (!f) return false;
    d.x = Tensor::from(std::move(shape), std::move(x));
    d.labels.assign(l.begin(), l.end());
    return true;
}

std::string hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

std::filesystem::path cache_file(const std::filesystem::path& dir, int client) {
    return dir / ("client_" + std::to_string(client) + ".bin");
}

void save_client(const std::filesystem::path& file, const ClientData& data) {
    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write data cache " + file.string());
    const auto& s = data.train.x.shape();
    f << "FEDSKEL-DATA 1 " << hex(data.spec.hash()) << ' ' << data.train.size() << ' ' << data.test.size() << ' '
      << s[1] << ' ' << s[2] << ' ' << s[3] << '\n';
    std::vector<int32_t> parents(data.parents.begin(), data.parents.end());
    f.write(reinterpret_cast<const char*>(parents.data()), static_cast<std::streamsize>(parents.size() * 4));
    write_dataset(f, data.train);
    write_dataset(f, data.test);
    if (!f) throw IoError("failed writing data cache " + file.string());
}

bool load_client(const std::filesystem::path& file, const ClientDatasetSpec& spec, ClientData& out) {
    std::ifstream f(file, std::ios::binary);
    if (!f) return false;
    std::string magic, version, hash;
    int64_t ntrain = 0, ntest = 0, c = 0, t = 0, v = 0;
    f >> magic >> version >> hash >> ntrain >> ntest >> c >> t >> v;
    if (!f || magic != "FEDSKEL-DATA" || version != "1" || hash != hex(spec.hash())) return false;
    f.get();
    ClientData d;
    d.spec = spec;
    std::vector<int32_t> parents(static_cast<size_t>(v));
    f.read(reinterpret_cast<char*>(parents.data()), static_cast<std::streamsize>(parents.size() * 4));
    d.parents.assign(parents.begin(), parents.end());
    if (!read_dataset(f, {ntrain, c, t, v}, d.train) || !read_dataset(f, {ntest, c, t, v}, d.test)) return false;
    out = std::move(d);
    return true;
}

void write_manifest(const std::filesystem::path& dir, const std::vector<ClientData>& clients) {
    nlohmann::ordered_json m;
    m["format"] = "fedskel-suite";
    m["version"] = 1;
    m["clients"] = nlohmann::ordered_json::array();
    for (const auto& c : clients) {
        nlohmann::ordered_json e;
        e["client"] = c.spec.client;
        e["file"] = cache_file("", c.spec.client).string();
        e["hash"] = hex(c.spec.hash());
        e["labels"] = c.spec.labels;
        e["train"] = c.train.size();
        e["test"] = c.test.size();
        e["rewire"] = c.spec.rewire;
        e["sigma"] = c.spec.sigma;
        e["parents"] = c.parents;
        m["clients"].push_back(std::move(e));
    }
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
    f << m.dump(2) << '\n';
}

std::vector<ClientData> load_or_generate(const std::filesystem::path& dir,
                                         const std::vector<ClientDatasetSpec>& specs) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create data directory " + dir.string() + ": " + ec.message());
    std::vector<ClientData> out;
    for (const auto& spec : specs) {
        ClientData d;
        if (!load_client(cache_file(dir, spec.client), spec, d)) {
            d = generate(spec);
            save_client(cache_file(dir, spec.client), d);
        }
        out.push_back(std::move(d));
    }
    write_manifest(dir, out);
    return out;
}

}  // namespace fedskel
