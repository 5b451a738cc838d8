#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "canalseg/layers.hpp"
#include "canalseg/tensor.hpp"

namespace canalseg {

struct LengthMismatch : std::runtime_error {
    explicit LengthMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct NetConfig {
    int levels = 3;
    int base_channels = 8;
    std::array<int, 3> input_dims{64, 64, 64};  // D, H, W
    std::vector<double> supervision_weights{1.0, 0.5, 0.25};
    int se_reduction = 4;

    int channels_at(int level) const { return base_channels << level; }

    void validate(bool supervised) const {
        if (levels < 2) throw std::invalid_argument("levels must be >= 2");
        if (base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
        if (se_reduction < 1) throw std::invalid_argument("se_reduction must be >= 1");
        const int div = 1 << (levels - 1);
        for (int d : input_dims)
            if (d < div || d % div != 0)
                throw std::invalid_argument("input dims must be divisible by 2^(levels-1)");
        if (supervised && supervision_weights.size() != static_cast<std::size_t>(levels))
            throw std::invalid_argument("need one supervision weight per head (main first)");
    }
};

// Descriptive layer entry for the self-describing checkpoint manifest.
struct LayerSpec {
    std::string kind;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
};

namespace detail {

inline Tensor5D concat_channels(const Tensor5D& a, const Tensor5D& b) {
    if (a.shape.n != b.shape.n || a.shape.d != b.shape.d || a.shape.h != b.shape.h ||
        a.shape.w != b.shape.w)
        throw ShapeMismatch("concat: " + a.shape.str() + " vs " + b.shape.str());
    Tensor5D out({a.shape.n, a.shape.c + b.shape.c, a.shape.d, a.shape.h, a.shape.w});
    const std::int64_t vox = a.shape.voxels();
    for (int n = 0; n < a.shape.n; ++n) {
        for (int c = 0; c < a.shape.c; ++c)
            std::copy_n(a.plane(n, c), vox, out.plane(n, c));
        for (int c = 0; c < b.shape.c; ++c)
            std::copy_n(b.plane(n, c), vox, out.plane(n, a.shape.c + c));
    }
    return out;
}

inline std::pair<Tensor5D, Tensor5D> split_channels(const Tensor5D& g, int c_first) {
    Tensor5D a({g.shape.n, c_first, g.shape.d, g.shape.h, g.shape.w});
    Tensor5D b({g.shape.n, g.shape.c - c_first, g.shape.d, g.shape.h, g.shape.w});
    const std::int64_t vox = g.shape.voxels();
    for (int n = 0; n < g.shape.n; ++n) {
        for (int c = 0; c < c_first; ++c)
            std::copy_n(g.plane(n, c), vox, a.plane(n, c));
        for (int c = c_first; c < g.shape.c; ++c)
            std::copy_n(g.plane(n, c), vox, b.plane(n, c - c_first));
    }
    return {std::move(a), std::move(b)};
}

inline void add_inplace(Tensor5D& a, const Tensor5D& b) {
    require_same_shape(a, b, "add");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace detail

using ParamVisitor = std::function<void(const std::string&, Parameter&)>;

// ---------------------------------------------------------------------------
// conv3 + batchnorm + relu
// ---------------------------------------------------------------------------

class ConvBNRelu {
public:
    ConvBNRelu() = default;
    ConvBNRelu(int cin, int cout, int k = 3) : conv(cin, cout, k), bn(cout) {}

    Tensor5D forward(const Tensor5D& x, bool training) {
        return relu.forward(bn.forward(conv.forward(x), training));
    }
    Tensor5D backward(const Tensor5D& gy) {
        return conv.backward(bn.backward(relu.backward(gy)));
    }
    void init(Rng& rng) { conv.init(rng); }
    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".w", conv.w);
        f(prefix + ".b", conv.b);
        f(prefix + ".gamma", bn.gamma);
        f(prefix + ".beta", bn.beta);
    }
    void describe(std::vector<LayerSpec>& out) const {
        out.push_back({"Conv3", conv.in_channels(), conv.out_channels(), conv.kernel()});
        out.push_back({"BatchNorm", conv.out_channels(), conv.out_channels(), 0});
        out.push_back({"ReLU", conv.out_channels(), conv.out_channels(), 0});
    }

    Conv3 conv;
    BatchNorm bn;
    ReLU relu;
};

// ---------------------------------------------------------------------------
// Additive attention gate: alpha = sigmoid(psi(relu(wx*x + wg*up(g)))),
// output = alpha (broadcast over channels) * x_skip.
// ---------------------------------------------------------------------------

class AttentionGate {
public:
    AttentionGate() = default;
    AttentionGate(int skip_channels, int gate_channels)
        : wx(skip_channels, std::max(1, skip_channels / 2), 1),
          wg(gate_channels, std::max(1, skip_channels / 2), 1),
          psi(std::max(1, skip_channels / 2), 1, 1),
          f_int_(std::max(1, skip_channels / 2)) {}

    // g arrives at half the spatial dims of x_skip and is upsampled inside.
    Tensor5D forward(const Tensor5D& x_skip, const Tensor5D& g, bool cache = true) {
        if (g.shape.d * 2 != x_skip.shape.d || g.shape.h * 2 != x_skip.shape.h ||
            g.shape.w * 2 != x_skip.shape.w)
            throw ShapeMismatch("attention gate expects g at half the skip dims");
        Tensor5D up_g = up.forward(g, x_skip.shape.d, x_skip.shape.h, x_skip.shape.w, cache);
        Tensor5D s = wx.forward(x_skip, cache);
        detail::add_inplace(s, wg.forward(up_g, cache));
        Tensor5D alpha = sig.forward(psi.forward(relu.forward(s, cache), cache), cache);

        Tensor5D out(x_skip.shape);
        const std::int64_t vox = x_skip.shape.voxels();
        for (int n = 0; n < x_skip.shape.n; ++n) {
            const float* a = alpha.plane(n, 0);
            for (int c = 0; c < x_skip.shape.c; ++c) {
                const float* in = x_skip.plane(n, c);
                float* o = out.plane(n, c);
                for (std::int64_t i = 0; i < vox; ++i) o[i] = a[i] * in[i];
            }
        }
        if (cache) {
            x_cache_ = x_skip;
            alpha_cache_ = std::move(alpha);
        }
        return out;
    }

    // Returns (grad wrt x_skip, grad wrt g).
    std::pair<Tensor5D, Tensor5D> backward(const Tensor5D& gy) {
        require_same_shape(gy, x_cache_, "attention gate backward");
        const std::int64_t vox = gy.shape.voxels();

        Tensor5D d_alpha({gy.shape.n, 1, gy.shape.d, gy.shape.h, gy.shape.w});
        Tensor5D gx(gy.shape);
        for (int n = 0; n < gy.shape.n; ++n) {
            float* da = d_alpha.plane(n, 0);
            const float* a = alpha_cache_.plane(n, 0);
            for (int c = 0; c < gy.shape.c; ++c) {
                const float* g = gy.plane(n, c);
                const float* x = x_cache_.plane(n, c);
                float* o = gx.plane(n, c);
                for (std::int64_t i = 0; i < vox; ++i) {
                    da[i] += g[i] * x[i];
                    o[i] = a[i] * g[i];
                }
            }
        }

        Tensor5D ds = relu.backward(psi.backward(sig.backward(d_alpha)));
        detail::add_inplace(gx, wx.backward(ds));
        Tensor5D dg = up.backward(wg.backward(ds));
        return {std::move(gx), std::move(dg)};
    }

    void init(Rng& rng) {
        wx.init(rng);
        wg.init(rng);
        psi.init(rng);
    }
    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".wx.w", wx.w);
        f(prefix + ".wx.b", wx.b);
        f(prefix + ".wg.w", wg.w);
        f(prefix + ".wg.b", wg.b);
        f(prefix + ".psi.w", psi.w);
        f(prefix + ".psi.b", psi.b);
    }

    int intermediate_channels() const { return f_int_; }

    Conv3 wx, wg, psi;

private:
    int f_int_ = 1;
    Resize3 up;
    ReLU relu;
    Sigmoid sig;
    Tensor5D x_cache_, alpha_cache_;
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation channel attention
// ---------------------------------------------------------------------------

class SEBlock {
public:
    SEBlock() = default;
    SEBlock(int channels, int reduction)
        : fc1(channels, std::max(1, channels / reduction), 1),
          fc2(std::max(1, channels / reduction), channels, 1),
          c_(channels) {}

    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        if (x.shape.c != c_) throw ShapeMismatch("SE channels");
        const std::int64_t vox = x.shape.voxels();
        Tensor5D pooled({x.shape.n, c_, 1, 1, 1});
        for (int n = 0; n < x.shape.n; ++n)
            for (int c = 0; c < c_; ++c) {
                double s = 0.0;
                const float* in = x.plane(n, c);
                for (std::int64_t i = 0; i < vox; ++i) s += in[i];
                pooled.at(n, c, 0, 0, 0) = static_cast<float>(s / static_cast<double>(vox));
            }

        Tensor5D scale = sig.forward(fc2.forward(relu.forward(fc1.forward(pooled, cache), cache),
                                                 cache),
                                     cache);
        Tensor5D out(x.shape);
        for (int n = 0; n < x.shape.n; ++n)
            for (int c = 0; c < c_; ++c) {
                const float s = scale.at(n, c, 0, 0, 0);
                const float* in = x.plane(n, c);
                float* o = out.plane(n, c);
                for (std::int64_t i = 0; i < vox; ++i) o[i] = s * in[i];
            }
        if (cache) {
            x_cache_ = x;
            scale_cache_ = std::move(scale);
        }
        return out;
    }

    Tensor5D backward(const Tensor5D& gy) {
        require_same_shape(gy, x_cache_, "SE backward");
        const std::int64_t vox = gy.shape.voxels();

        Tensor5D d_scale({gy.shape.n, c_, 1, 1, 1});
        Tensor5D gx(gy.shape);
        for (int n = 0; n < gy.shape.n; ++n)
            for (int c = 0; c < c_; ++c) {
                const float* g = gy.plane(n, c);
                const float* x = x_cache_.plane(n, c);
                float* o = gx.plane(n, c);
                double ds = 0.0;
                const float s = scale_cache_.at(n, c, 0, 0, 0);
                for (std::int64_t i = 0; i < vox; ++i) {
                    ds += static_cast<double>(g[i]) * x[i];
                    o[i] = s * g[i];
                }
                d_scale.at(n, c, 0, 0, 0) = static_cast<float>(ds);
            }

        Tensor5D d_pooled = fc1.backward(relu.backward(fc2.backward(sig.backward(d_scale))));
        for (int n = 0; n < gy.shape.n; ++n)
            for (int c = 0; c < c_; ++c) {
                const float spread = d_pooled.at(n, c, 0, 0, 0) / static_cast<float>(vox);
                float* o = gx.plane(n, c);
                for (std::int64_t i = 0; i < vox; ++i) o[i] += spread;
            }
        return gx;
    }

    void init(Rng& rng) {
        fc1.init(rng);
        fc2.init(rng);
    }
    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".fc1.w", fc1.w);
        f(prefix + ".fc1.b", fc1.b);
        f(prefix + ".fc2.w", fc2.w);
        f(prefix + ".fc2.b", fc2.b);
    }

    Conv3 fc1, fc2;

private:
    int c_ = 0;
    ReLU relu;
    Sigmoid sig;
    Tensor5D x_cache_, scale_cache_;
};

// ---------------------------------------------------------------------------
// Residual block: y = relu(BN(conv(relu(BN(conv(x))))) + proj(x)).
// proj is the identity when channels match, a 1x1x1 conv otherwise.
// With residual=false the shortcut is dropped (ablation variant).
// ---------------------------------------------------------------------------

class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(int cin, int cout, bool residual = true)
        : c1(cin, cout, 3), c2(cout, cout, 3), bn1(cout), bn2(cout), residual_(residual) {
        if (residual_ && cin != cout) proj.emplace(cin, cout, 1);
    }

    Tensor5D forward(const Tensor5D& x, bool training) {
        Tensor5D h = bn2.forward(c2.forward(r1.forward(bn1.forward(c1.forward(x), training))),
                                 training);
        if (residual_) {
            if (proj)
                detail::add_inplace(h, proj->forward(x));
            else
                detail::add_inplace(h, x);
        }
        return r_out.forward(h);
    }

    Tensor5D backward(const Tensor5D& gy) {
        Tensor5D gh = r_out.backward(gy);
        Tensor5D gx = c1.backward(bn1.backward(r1.backward(c2.backward(bn2.backward(gh)))));
        if (residual_) {
            if (proj)
                detail::add_inplace(gx, proj->backward(gh));
            else
                detail::add_inplace(gx, gh);
        }
        return gx;
    }

    void init(Rng& rng) {
        c1.init(rng);
        c2.init(rng);
        if (proj) proj->init(rng);
    }
    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".c1.w", c1.w);
        f(prefix + ".c1.b", c1.b);
        f(prefix + ".bn1.gamma", bn1.gamma);
        f(prefix + ".bn1.beta", bn1.beta);
        f(prefix + ".c2.w", c2.w);
        f(prefix + ".c2.b", c2.b);
        f(prefix + ".bn2.gamma", bn2.gamma);
        f(prefix + ".bn2.beta", bn2.beta);
        if (proj) {
            f(prefix + ".proj.w", proj->w);
            f(prefix + ".proj.b", proj->b);
        }
    }
    void describe(std::vector<LayerSpec>& out) const {
        out.push_back({"Conv3", c1.in_channels(), c1.out_channels(), 3});
        out.push_back({"BatchNorm", c1.out_channels(), c1.out_channels(), 0});
        out.push_back({"ReLU", c1.out_channels(), c1.out_channels(), 0});
        out.push_back({"Conv3", c2.in_channels(), c2.out_channels(), 3});
        out.push_back({"BatchNorm", c2.out_channels(), c2.out_channels(), 0});
        if (residual_)
            out.push_back({"Add", c2.out_channels(), c2.out_channels(), proj ? 1 : 0});
        out.push_back({"ReLU", c2.out_channels(), c2.out_channels(), 0});
    }

    bool has_residual() const { return residual_; }

    Conv3 c1, c2;
    BatchNorm bn1, bn2;
    std::optional<Conv3> proj;

private:
    bool residual_ = true;
    ReLU r1, r_out;
};

// ---------------------------------------------------------------------------
// Deeply supervised attention U-Net (coarse localization stage)
// ---------------------------------------------------------------------------

struct CoarseOut {
    Tensor5D main;
    std::vector<Tensor5D> aux;  // training mode only; shallow -> deep
};

class CoarseNet {
public:
    explicit CoarseNet(NetConfig cfg, std::uint64_t init_seed = 1) : cfg_(cfg) {
        cfg_.validate(/*supervised=*/true);
        const int L = cfg_.levels;
        for (int l = 0; l < L; ++l) {
            const int cin = l == 0 ? 1 : cfg_.channels_at(l - 1);
            const int c = cfg_.channels_at(l);
            enc1_.emplace_back(cin, c);
            enc2_.emplace_back(c, c);
        }
        pools_.resize(L - 1);
        for (int l = L - 2; l >= 0; --l) {
            const int c = cfg_.channels_at(l);
            ups_.emplace_back(cfg_.channels_at(l + 1), c);
            gates_.emplace_back(c, cfg_.channels_at(l + 1));
            dec1_.emplace_back(2 * c, c);
            dec2_.emplace_back(c, c);
        }
        main_head_ = Conv3(cfg_.base_channels, 1, 1);
        // One auxiliary head per decoder level below the top, plus the
        // bottleneck; ordered shallow -> deep to match the supervision weights.
        for (int l = 1; l <= L - 2; ++l) aux_heads_.emplace_back(cfg_.channels_at(l), 1, 1);
        aux_heads_.emplace_back(cfg_.channels_at(L - 1), 1, 1);
        aux_sigs_.resize(aux_heads_.size());
        aux_ups_.resize(aux_heads_.size());

        Rng rng(init_seed);
        for (auto& b : enc1_) b.init(rng);
        for (auto& b : enc2_) b.init(rng);
        for (auto& u : ups_) u.init(rng);
        for (auto& g : gates_) g.init(rng);
        for (auto& b : dec1_) b.init(rng);
        for (auto& b : dec2_) b.init(rng);
        main_head_.init(rng);
        for (auto& h : aux_heads_) h.init(rng);
    }

    const NetConfig& config() const { return cfg_; }

    CoarseOut forward(const Tensor5D& x, bool training) {
        const int L = cfg_.levels;
        if (x.shape.c != 1) throw ShapeMismatch("coarse net expects a single input channel");

        std::vector<Tensor5D> skips(L - 1);
        Tensor5D cur = x;
        for (int l = 0; l < L; ++l) {
            cur = enc2_[l].forward(enc1_[l].forward(cur, training), training);
            if (l < L - 1) {
                skips[l] = cur;
                cur = pools_[l].forward(cur);
            }
        }

        CoarseOut out;
        std::vector<Tensor5D> aux_feats;  // feature tensors carrying aux heads, deep -> shallow
        aux_feats.push_back(cur);         // bottleneck
        for (int s = 0; s < L - 1; ++s) {
            const int level = L - 2 - s;
            Tensor5D gated = gates_[s].forward(skips[level], cur, /*cache=*/training);
            Tensor5D up = ups_[s].forward(cur, training);
            cur = dec2_[s].forward(
                dec1_[s].forward(detail::concat_channels(up, gated), training), training);
            if (level >= 1) aux_feats.push_back(cur);
        }

        out.main = main_sig_.forward(main_head_.forward(cur, training), training);
        if (training) {
            out.aux.resize(aux_heads_.size());
            // aux_feats is deep -> shallow; heads are ordered shallow -> deep.
            for (std::size_t j = 0; j < aux_heads_.size(); ++j) {
                const Tensor5D& feat = aux_feats[aux_heads_.size() - 1 - j];
                Tensor5D logits = aux_heads_[j].forward(feat);
                out.aux[j] = aux_ups_[j].forward(aux_sigs_[j].forward(logits), x.shape.d,
                                                 x.shape.h, x.shape.w);
            }
        }
        return out;
    }

    // Gradients arrive per head (main first, aux shallow -> deep).
    void backward(const Tensor5D& g_main, const std::vector<Tensor5D>& g_aux) {
        const int L = cfg_.levels;
        if (g_aux.size() != aux_heads_.size())
            throw LengthMismatch("expected " + std::to_string(aux_heads_.size()) +
                                 " aux gradients");

        // Aux gradients mapped back onto their feature tensors, deep -> shallow.
        std::vector<Tensor5D> aux_feat_grads(aux_heads_.size());
        for (std::size_t j = 0; j < aux_heads_.size(); ++j) {
            Tensor5D g = aux_heads_[j].backward(
                aux_sigs_[j].backward(aux_ups_[j].backward(g_aux[j])));
            aux_feat_grads[aux_heads_.size() - 1 - j] = std::move(g);
        }

        Tensor5D g_cur = main_head_.backward(main_sig_.backward(g_main));
        std::vector<Tensor5D> skip_grads(L - 1);
        std::size_t aux_idx = aux_feat_grads.size() - 1;  // next aux site going backwards
        for (int s = L - 2; s >= 0; --s) {
            const int level = L - 2 - s;
            if (level >= 1) {
                detail::add_inplace(g_cur, aux_feat_grads[aux_idx]);
                --aux_idx;
            }
            Tensor5D g_cat = dec1_[s].backward(dec2_[s].backward(g_cur));
            auto [g_up, g_gated] = detail::split_channels(g_cat, cfg_.channels_at(level));
            g_cur = ups_[s].backward(g_up);
            auto [g_skip, g_gate_src] = gates_[s].backward(g_gated);
            skip_grads[level] = std::move(g_skip);
            detail::add_inplace(g_cur, g_gate_src);
        }
        detail::add_inplace(g_cur, aux_feat_grads[0]);  // bottleneck head

        for (int l = L - 1; l >= 0; --l) {
            if (l < L - 1) {
                g_cur = pools_[l].backward(g_cur);
                detail::add_inplace(g_cur, skip_grads[l]);
            }
            g_cur = enc1_[l].backward(enc2_[l].backward(g_cur));
        }
    }

    void visit_params(const ParamVisitor& f) {
        const int L = cfg_.levels;
        for (int l = 0; l < L; ++l) {
            enc1_[l].visit("enc" + std::to_string(l) + ".a", f);
            enc2_[l].visit("enc" + std::to_string(l) + ".b", f);
        }
        for (int s = 0; s < L - 1; ++s) {
            const std::string p = "dec" + std::to_string(L - 2 - s);
            f(p + ".up.w", ups_[s].w);
            f(p + ".up.b", ups_[s].b);
            gates_[s].visit(p + ".gate", f);
            dec1_[s].visit(p + ".a", f);
            dec2_[s].visit(p + ".b", f);
        }
        f("head.w", main_head_.w);
        f("head.b", main_head_.b);
        for (std::size_t j = 0; j < aux_heads_.size(); ++j) {
            f("aux" + std::to_string(j) + ".w", aux_heads_[j].w);
            f("aux" + std::to_string(j) + ".b", aux_heads_[j].b);
        }
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        visit_params([&](const std::string&, Parameter& p) { out.push_back(&p); });
        return out;
    }

    std::vector<LayerSpec> layout() const {
        std::vector<LayerSpec> out;
        const int L = cfg_.levels;
        for (int l = 0; l < L; ++l) {
            enc1_[l].describe(out);
            enc2_[l].describe(out);
            if (l < L - 1)
                out.push_back({"MaxPool2", cfg_.channels_at(l), cfg_.channels_at(l), 2});
        }
        for (int s = 0; s < L - 1; ++s) {
            const int c = cfg_.channels_at(L - 2 - s);
            out.push_back({"ConvT3", 2 * c, c, 2});
            out.push_back({"ConcatC", c, 2 * c, 0});
            dec1_[s].describe(out);
            dec2_[s].describe(out);
        }
        out.push_back({"Conv3", cfg_.base_channels, 1, 1});
        out.push_back({"Sigmoid", 1, 1, 0});
        return out;
    }

private:
    NetConfig cfg_;
    std::vector<ConvBNRelu> enc1_, enc2_;
    std::vector<MaxPool2> pools_;
    std::vector<ConvTranspose3> ups_;
    std::vector<AttentionGate> gates_;
    std::vector<ConvBNRelu> dec1_, dec2_;
    Conv3 main_head_;
    Sigmoid main_sig_;
    std::vector<Conv3> aux_heads_;
    std::vector<Sigmoid> aux_sigs_;
    std::vector<Resize3> aux_ups_;
};

// ---------------------------------------------------------------------------
// Deep supervision loss: weighted dice over main + aux heads, sum-normalized
// ---------------------------------------------------------------------------

class SupervisedDiceLoss {
public:
    double forward(const Tensor5D& main, const std::vector<Tensor5D>& aux, const Tensor5D& g,
                   const std::vector<double>& weights) {
        if (weights.size() != aux.size() + 1)
            throw LengthMismatch("need one weight per head, got " +
                                 std::to_string(weights.size()) + " for " +
                                 std::to_string(aux.size() + 1) + " heads");
        weights_ = weights;
        weight_sum_ = 0.0;
        for (double w : weights) weight_sum_ += w;
        losses_.assign(weights.size(), DiceLoss{});

        double total = weights[0] * losses_[0].forward(main, g);
        for (std::size_t i = 0; i < aux.size(); ++i)
            total += weights[i + 1] * losses_[i + 1].forward(aux[i], g);
        return total / weight_sum_;
    }

    Tensor5D main_grad() const { return losses_[0].backward(weights_[0] / weight_sum_); }
    std::vector<Tensor5D> aux_grads() const {
        std::vector<Tensor5D> out;
        for (std::size_t i = 1; i < losses_.size(); ++i)
            out.push_back(losses_[i].backward(weights_[i] / weight_sum_));
        return out;
    }

private:
    std::vector<DiceLoss> losses_;
    std::vector<double> weights_;
    double weight_sum_ = 1.0;
};

inline double supervised_loss(const Tensor5D& main, const std::vector<Tensor5D>& aux,
                              const Tensor5D& g, const std::vector<double>& weights) {
    SupervisedDiceLoss l;
    return l.forward(main, aux, g, weights);
}

// ---------------------------------------------------------------------------
// Multi-scale-input residual U-Net with channel-attention skips (fine stage)
// ---------------------------------------------------------------------------

struct FineOptions {
    bool multiscale = true;
    bool residual = true;
};

class FineNet {
public:
    explicit FineNet(NetConfig cfg, FineOptions opts = {}, std::uint64_t init_seed = 1)
        : cfg_(cfg), opts_(opts) {
        cfg_.validate(/*supervised=*/false);
        const int L = cfg_.levels;
        if (opts_.multiscale && L < 3)
            throw std::invalid_argument("multiscale stems need at least 3 levels");
        stem_channels_ = std::max(1, cfg_.base_channels / 2);

        for (int l = 0; l < L; ++l) {
            int cin = l == 0 ? 1 : cfg_.channels_at(l - 1);
            if (opts_.multiscale && (l == 1 || l == 2)) cin += stem_channels_;
            enc_.emplace_back(cin, cfg_.channels_at(l), opts_.residual);
        }
        pools_.resize(L - 1);
        for (int l = 0; l < L - 1; ++l)
            se_.emplace_back(cfg_.channels_at(l), cfg_.se_reduction);
        for (int l = L - 2; l >= 0; --l) {
            const int c = cfg_.channels_at(l);
            ups_.emplace_back(cfg_.channels_at(l + 1), c);
            dec_.emplace_back(2 * c, c, opts_.residual);
        }
        if (opts_.multiscale) {
            stem2_ = ConvBNRelu(1, stem_channels_);
            stem3_ = ConvBNRelu(1, stem_channels_);
        }
        head_ = Conv3(cfg_.base_channels, 1, 1);

        Rng rng(init_seed);
        if (opts_.multiscale) {
            stem2_.init(rng);
            stem3_.init(rng);
        }
        for (auto& b : enc_) b.init(rng);
        for (auto& s : se_) s.init(rng);
        for (auto& u : ups_) u.init(rng);
        for (auto& b : dec_) b.init(rng);
        head_.init(rng);
    }

    const NetConfig& config() const { return cfg_; }
    const FineOptions& options() const { return opts_; }
    int stem_channels() const { return stem_channels_; }

    // x1 at base dims; x2/x3 at arbitrary dims, resampled internally to the
    // spatial dims of encoder levels 1 and 2 before their stems.
    Tensor5D forward(const Tensor5D& x1, const Tensor5D& x2, const Tensor5D& x3, bool training) {
        const int L = cfg_.levels;
        if (x1.shape.c != 1) throw ShapeMismatch("fine net expects a single input channel");

        Tensor5D s2, s3;
        if (opts_.multiscale) {
            s2 = stem2_.forward(
                stem_rs2_.forward(x2, x1.shape.d / 2, x1.shape.h / 2, x1.shape.w / 2, training),
                training);
            s3 = stem3_.forward(
                stem_rs3_.forward(x3, x1.shape.d / 4, x1.shape.h / 4, x1.shape.w / 4, training),
                training);
        }

        std::vector<Tensor5D> skips(L - 1);
        Tensor5D cur = x1;
        for (int l = 0; l < L; ++l) {
            if (opts_.multiscale && l == 1) cur = detail::concat_channels(cur, s2);
            if (opts_.multiscale && l == 2) cur = detail::concat_channels(cur, s3);
            cur = enc_[l].forward(cur, training);
            if (l < L - 1) {
                skips[l] = cur;
                cur = pools_[l].forward(cur);
            }
        }

        for (int s = 0; s < L - 1; ++s) {
            const int level = L - 2 - s;
            Tensor5D up = ups_[s].forward(cur, training);
            Tensor5D gated = se_[level].forward(skips[level], training);
            cur = dec_[s].forward(detail::concat_channels(up, gated), training);
        }
        return out_sig_.forward(head_.forward(cur, training), training);
    }

    void backward(const Tensor5D& g_out) {
        const int L = cfg_.levels;
        Tensor5D g_cur = head_.backward(out_sig_.backward(g_out));

        std::vector<Tensor5D> skip_grads(L - 1);
        for (int s = L - 2; s >= 0; --s) {
            const int level = L - 2 - s;
            Tensor5D g_cat = dec_[s].backward(g_cur);
            auto [g_up, g_gated] = detail::split_channels(g_cat, cfg_.channels_at(level));
            skip_grads[level] = se_[level].backward(g_gated);
            g_cur = ups_[s].backward(g_up);
        }

        Tensor5D g_s2, g_s3;
        for (int l = L - 1; l >= 0; --l) {
            if (l < L - 1) {
                g_cur = pools_[l].backward(g_cur);
                detail::add_inplace(g_cur, skip_grads[l]);
            }
            g_cur = enc_[l].backward(g_cur);
            if (opts_.multiscale && l == 2) {
                auto [gm, gs] = detail::split_channels(g_cur, cfg_.channels_at(1));
                g_cur = std::move(gm);
                g_s3 = std::move(gs);
            }
            if (opts_.multiscale && l == 1) {
                auto [gm, gs] = detail::split_channels(g_cur, cfg_.channels_at(0));
                g_cur = std::move(gm);
                g_s2 = std::move(gs);
            }
        }
        if (opts_.multiscale) {
            stem_rs2_.backward(stem2_.backward(g_s2));
            stem_rs3_.backward(stem3_.backward(g_s3));
        }
    }

    void visit_params(const ParamVisitor& f) {
        const int L = cfg_.levels;
        if (opts_.multiscale) {
            stem2_.visit("stem2", f);
            stem3_.visit("stem3", f);
        }
        for (int l = 0; l < L; ++l) enc_[l].visit("enc" + std::to_string(l), f);
        for (int l = 0; l < L - 1; ++l) se_[l].visit("se" + std::to_string(l), f);
        for (int s = 0; s < L - 1; ++s) {
            const std::string p = "dec" + std::to_string(L - 2 - s);
            f(p + ".up.w", ups_[s].w);
            f(p + ".up.b", ups_[s].b);
            dec_[s].visit(p, f);
        }
        f("head.w", head_.w);
        f("head.b", head_.b);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        visit_params([&](const std::string&, Parameter& p) { out.push_back(&p); });
        return out;
    }

    std::vector<LayerSpec> layout() const {
        std::vector<LayerSpec> out;
        const int L = cfg_.levels;
        if (opts_.multiscale) {
            out.push_back({"Conv3", 1, stem_channels_, 3});
            out.push_back({"Conv3", 1, stem_channels_, 3});
        }
        for (int l = 0; l < L; ++l) {
            enc_[l].describe(out);
            if (l < L - 1)
                out.push_back({"MaxPool2", cfg_.channels_at(l), cfg_.channels_at(l), 2});
        }
        for (int s = 0; s < L - 1; ++s) {
            const int c = cfg_.channels_at(L - 2 - s);
            out.push_back({"ConvT3", 2 * c, c, 2});
            out.push_back({"GlobalAvgPool", c, c, 0});
            out.push_back({"ConcatC", c, 2 * c, 0});
            dec_[s].describe(out);
        }
        out.push_back({"Conv3", cfg_.base_channels, 1, 1});
        out.push_back({"Sigmoid", 1, 1, 0});
        return out;
    }

    ConvBNRelu stem2_, stem3_;
    std::vector<ResidualBlock> enc_;
    std::vector<SEBlock> se_;
    std::vector<ConvTranspose3> ups_;
    std::vector<ResidualBlock> dec_;
    Conv3 head_;

private:
    NetConfig cfg_;
    FineOptions opts_;
    int stem_channels_ = 4;
    std::vector<MaxPool2> pools_;
    Resize3 stem_rs2_, stem_rs3_;
    Sigmoid out_sig_;
};

}  // namespace canalseg
