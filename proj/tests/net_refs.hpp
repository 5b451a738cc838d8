// Double-precision reference forwards of whole network graphs, assembled from
// the brute-force operator references. The gradient checks differentiate
// these numerically and compare against the production backward passes.
#pragma once

#include <map>
#include <string>

#include "canalseg/nets.hpp"
#include "oracles.hpp"

namespace net_refs {

using canalseg::NetConfig;
using canalseg::Parameter;
using canalseg::Shape5;
using canalseg::Tensor5D;
using oracles::DTensor;

using ParamMap = std::map<std::string, Parameter*>;

template <class Net>
ParamMap param_map(Net& net) {
    ParamMap m;
    net.visit_params([&](const std::string& name, Parameter& p) { m[name] = &p; });
    return m;
}

inline DTensor value(const ParamMap& m, const std::string& name) {
    return DTensor(m.at(name)->value);
}

// conv3(same) + train-mode batchnorm + relu
inline DTensor conv_bn_relu_ref(const ParamMap& m, const std::string& prefix, const DTensor& x) {
    const DTensor h = oracles::conv3_ref(x, value(m, prefix + ".w"), value(m, prefix + ".b"),
                                         /*same=*/true);
    return oracles::relu_ref(oracles::batchnorm_train_ref(h, value(m, prefix + ".gamma"),
                                                          value(m, prefix + ".beta")));
}

inline DTensor attention_gate_ref(const ParamMap& m, const std::string& prefix,
                                  const DTensor& skip, const DTensor& g) {
    const DTensor up = oracles::resize3_ref(g, skip.shape.d, skip.shape.h, skip.shape.w);
    DTensor s = oracles::conv3_ref(skip, value(m, prefix + ".wx.w"), value(m, prefix + ".wx.b"),
                                   true);
    const DTensor sg = oracles::conv3_ref(up, value(m, prefix + ".wg.w"),
                                          value(m, prefix + ".wg.b"), true);
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] += sg.data[i];
    const DTensor alpha = oracles::sigmoid_ref(oracles::conv3_ref(
        oracles::relu_ref(s), value(m, prefix + ".psi.w"), value(m, prefix + ".psi.b"), true));

    DTensor out(skip.shape);
    const std::int64_t vox = skip.shape.voxels();
    for (int n = 0; n < skip.shape.n; ++n)
        for (int c = 0; c < skip.shape.c; ++c)
            for (std::int64_t i = 0; i < vox; ++i)
                out.data[(std::size_t(n) * skip.shape.c + c) * vox + i] =
                    alpha.data[std::size_t(n) * vox + i] *
                    skip.data[(std::size_t(n) * skip.shape.c + c) * vox + i];
    return out;
}

inline DTensor residual_block_ref(const ParamMap& m, const std::string& prefix, const DTensor& x,
                                  bool has_proj) {
    const DTensor h1 = oracles::relu_ref(oracles::batchnorm_train_ref(
        oracles::conv3_ref(x, value(m, prefix + ".c1.w"), value(m, prefix + ".c1.b"), true),
        value(m, prefix + ".bn1.gamma"), value(m, prefix + ".bn1.beta")));
    DTensor h2 = oracles::batchnorm_train_ref(
        oracles::conv3_ref(h1, value(m, prefix + ".c2.w"), value(m, prefix + ".c2.b"), true),
        value(m, prefix + ".bn2.gamma"), value(m, prefix + ".bn2.beta"));
    const DTensor s = has_proj
                          ? oracles::conv3_ref(x, value(m, prefix + ".proj.w"),
                                               value(m, prefix + ".proj.b"), true)
                          : x;
    for (std::size_t i = 0; i < h2.data.size(); ++i) h2.data[i] += s.data[i];
    return oracles::relu_ref(h2);
}

inline DTensor se_block_ref(const ParamMap& m, const std::string& prefix, const DTensor& x) {
    const std::int64_t vox = x.shape.voxels();
    DTensor pooled(Shape5{x.shape.n, x.shape.c, 1, 1, 1});
    for (int n = 0; n < x.shape.n; ++n)
        for (int c = 0; c < x.shape.c; ++c) {
            double s = 0.0;
            for (std::int64_t i = 0; i < vox; ++i)
                s += x.data[(std::size_t(n) * x.shape.c + c) * vox + i];
            pooled.at(n, c, 0, 0, 0) = s / double(vox);
        }
    const DTensor scale = oracles::sigmoid_ref(oracles::conv3_ref(
        oracles::relu_ref(oracles::conv3_ref(pooled, value(m, prefix + ".fc1.w"),
                                             value(m, prefix + ".fc1.b"), true)),
        value(m, prefix + ".fc2.w"), value(m, prefix + ".fc2.b"), true));

    DTensor out(x.shape);
    for (int n = 0; n < x.shape.n; ++n)
        for (int c = 0; c < x.shape.c; ++c)
            for (std::int64_t i = 0; i < vox; ++i)
                out.data[(std::size_t(n) * x.shape.c + c) * vox + i] =
                    scale.at(n, c, 0, 0, 0) *
                    x.data[(std::size_t(n) * x.shape.c + c) * vox + i];
    return out;
}

// Two-level deeply supervised attention U-Net, per the production topology.
inline double coarse_l2_supervised_loss_ref(const ParamMap& m, const NetConfig& cfg,
                                            const Tensor5D& x, const Tensor5D& g) {
    const DTensor dx(x), dg(g);
    const DTensor e0 = conv_bn_relu_ref(m, "enc0.b", conv_bn_relu_ref(m, "enc0.a", dx));
    const DTensor p0 = oracles::maxpool2_ref(e0);
    const DTensor e1 = conv_bn_relu_ref(m, "enc1.b", conv_bn_relu_ref(m, "enc1.a", p0));

    const DTensor gated = attention_gate_ref(m, "dec0.gate", e0, e1);
    const DTensor up = oracles::conv_transpose3_ref(e1, value(m, "dec0.up.w"),
                                                    value(m, "dec0.up.b"));
    const DTensor d0 = conv_bn_relu_ref(
        m, "dec0.b", conv_bn_relu_ref(m, "dec0.a", oracles::concat_ref(up, gated)));

    const DTensor main = oracles::sigmoid_ref(
        oracles::conv3_ref(d0, value(m, "head.w"), value(m, "head.b"), true));
    const DTensor aux0 = oracles::resize3_ref(
        oracles::sigmoid_ref(
            oracles::conv3_ref(e1, value(m, "aux0.w"), value(m, "aux0.b"), true)),
        x.shape.d, x.shape.h, x.shape.w);

    const double w0 = cfg.supervision_weights[0], w1 = cfg.supervision_weights[1];
    return (w0 * oracles::dice_loss_ref(main, dg) + w1 * oracles::dice_loss_ref(aux0, dg)) /
           (w0 + w1);
}

}  // namespace net_refs
