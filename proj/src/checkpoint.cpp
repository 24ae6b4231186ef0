#include "fedskel/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "fedskel/errors.hpp"

namespace fedskel {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace {

struct HeaderEntry {
    std::string name;
    Shape shape;
};

std::string shape_field(const Shape& s) {
    if (s.empty()) return "scalar";
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape(const std::string& f, const std::filesystem::path& file) {
    if (f == "scalar") return {};
    Shape s;
    std::stringstream ss(f);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            s.push_back(std::stoll(part));
        } catch (const std::exception&) {
            throw IoError(file.string() + ": bad shape '" + f + "'");
        }
    }
    return s;
}

std::vector<HeaderEntry> read_header(std::ifstream& in, const std::filesystem::path& file, int& round) {
    std::string line;
    if (!std::getline(in, line) || line != "FEDSKEL-CKPT 1") throw IoError(file.string() + ": not a checkpoint");
    std::vector<HeaderEntry> entries;
    while (std::getline(in, line)) {
        if (line == "END") return entries;
        std::stringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "round") {
            ss >> round;
        } else if (tag == "tensor") {
            std::string name, dtype, shape;
            ss >> name >> dtype >> shape;
            if (dtype != "f32") throw IoError(file.string() + ": unsupported dtype '" + dtype + "' for " + name);
            entries.push_back({name, parse_shape(shape, file)});
        } else {
            throw IoError(file.string() + ": unexpected header line '" + line + "'");
        }
    }
    throw IoError(file.string() + ": truncated header");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const ParamStore& params, int round) {
    if (file.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(file.parent_path(), ec);
    }
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + file.string());
    out << "FEDSKEL-CKPT 1\nround " << round << '\n';
    for (const auto& e : params.entries()) out << "tensor " << e.name << " f32 " << shape_field(e.tensor.shape()) << '\n';
    out << "END\n";
    for (const auto& e : params.entries()) {
        out.write(reinterpret_cast<const char*>(e.tensor.data().data()),
                  static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + file.string());
    Checkpoint ck;
    for (const auto& h : read_header(in, file, ck.round)) {
        std::vector<float> v(static_cast<size_t>(shape_numel(h.shape)));
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (!in) throw IoError(file.string() + ": truncated payload for " + h.name);
        ck.params.add(h.name, Tensor::from(h.shape, std::move(v)));
    }
    return ck;
}

std::vector<std::string> checkpoint_keys(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + file.string());
    int round = 0;
    std::vector<std::string> keys;
    for (auto& h : read_header(in, file, round)) keys.push_back(std::move(h.name));
    return keys;
}

}  // namespace fedskel
