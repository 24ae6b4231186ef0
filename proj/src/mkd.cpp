#include "fedskel/mkd.hpp"

#include "fedskel/errors.hpp"

namespace fedskel {

void MkdConfig::validate(int blocks) const {
    if (grains < 0 || grains >= blocks) {
        throw ConfigError("grains must lie in [0, " + std::to_string(blocks - 1) + "], got " + std::to_string(grains));
    }
    if (!(temperature > 0.0f)) throw ConfigError("kd temperature must be positive");
}

std::vector<TeacherStream> build_teacher_streams(const Architecture& server_arch, const ParamStore& server,
                                                 const Architecture& client_arch, const ParamStore& client,
                                                 const Tensor& x, const MkdConfig& config) {
    config.validate(client_arch.config.blocks());
    std::vector<TeacherStream> streams;
    if (config.grains == 0) return streams;

    const auto server_shapes = block_output_shapes(server_arch.config);
    const auto client_shapes = block_output_shapes(client_arch.config);
    const ForwardOptions server_opts{true, false, AdjacencySource::Server};
    const ForwardOptions client_opts{true, false, AdjacencySource::Client};

    Tensor f = x;
    for (int m = 1; m <= config.grains; ++m) {
        if (m > static_cast<int>(server_shapes.size()) || server_shapes[m - 1] != client_shapes[m - 1]) {
            throw GraftingError("server block " + std::to_string(m - 1) + " output " +
                                (m > static_cast<int>(server_shapes.size()) ? std::string("<missing>")
                                                                            : shape_str(server_shapes[m - 1])) +
                                " does not fit client block " + std::to_string(m) + " input " +
                                shape_str(client_shapes[m - 1]));
        }
        {
            NoGradGuard frozen;
            f = run_block(server_arch, server, m - 1, f, server_opts).detach();
        }
        TeacherStream s;
        s.grain = m;
        s.server_feature = f;
        s.logits = forward_from_block(client_arch, client, f, m, client_opts).logits;
        streams.push_back(std::move(s));
    }
    return streams;
}

Tensor kd_loss(const std::vector<TeacherStream>& streams, const Tensor& student_logits, float temperature) {
    Tensor total;
    for (const auto& s : streams) {
        Tensor term = kl_divergence(s.logits, student_logits, temperature);
        total = total.defined() ? add(total, term) : term;
    }
    return total.defined() ? total : Tensor::scalar(0.0f);
}

Tensor dual_ce_loss(const std::vector<TeacherStream>& streams, const Tensor& student_logits,
                    std::span<const int> labels) {
    Tensor total = cross_entropy(student_logits, labels);
    for (const auto& s : streams) total = add(total, cross_entropy(s.logits, labels));
    return total;
}

}  // namespace fedskel
