#pragma once

#include <span>
#include <vector>

#include "fedskel/model.hpp"

namespace fedskel {

struct MkdConfig {
    int grains = 2;             // number of shallow server blocks grafted, 0 disables
    float temperature = 1.0f;

    void validate(int blocks) const;
};

struct TeacherStream {
    int grain = 0;
    Tensor server_feature;  // output of server block grain-1, no gradient
    Tensor logits;          // client blocks [grain, M) + client classifier
};

/// Grafts the first m server blocks onto the client's remaining blocks for
/// m = 1..grains. The server path runs without a tape; gradients of the
/// teacher logits reach only client-owned tensors. Batch statistics are used
/// for BN on both sides of the graft and running stats are left alone.
std::vector<TeacherStream> build_teacher_streams(const Architecture& server_arch, const ParamStore& server,
                                                 const Architecture& client_arch, const ParamStore& client,
                                                 const Tensor& x, const MkdConfig& config);

/// Sum over streams of KL(softmax(teacher/T) || softmax(student/T)), teacher
/// detached, each term batch-averaged. Zero scalar without streams.
Tensor kd_loss(const std::vector<TeacherStream>& streams, const Tensor& student_logits, float temperature = 1.0f);

/// CE(student, y) + sum over streams of CE(teacher, y).
Tensor dual_ce_loss(const std::vector<TeacherStream>& streams, const Tensor& student_logits,
                    std::span<const int> labels);

}  // namespace fedskel
