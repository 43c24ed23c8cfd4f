#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autograd.hpp"
#include "hierarchy.hpp"
#include "json_util.hpp"
#include "prng.hpp"
#include "synth.hpp"

namespace dismesh {

struct LossWeights {
    double recon = 1.0;
    // At 1.0 the posterior collapses onto the prior on the tube dataset and
    // validation reconstruction stalls near 0.23x the mean-mesh baseline.
    double kl = 0.01;
    double swap = 1.0;
    double reg = 0.5;
    double xcov = 0.1;

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Architecture and objective settings. `channels[l]` is the width of the
/// encoder convolution at level l (the decoder mirrors it) and
/// `cheb_order[l]` its Chebyshev order K.
struct ModelConfig {
    std::vector<double> ratios{0.5, 0.5};
    std::vector<std::size_t> channels{16, 32};
    std::vector<std::size_t> cheb_order{6, 6};
    std::size_t hidden = 64;
    std::size_t d_shape = 8;
    std::size_t d_pose = 8;
    LossWeights weights;
    double beta_warmup_fraction = 0.2;
    double logvar_clamp = 10.0;

    std::size_t latent_dim() const { return d_shape + d_pose; }

    void validate() const {
        if (ratios.empty()) throw ValidationError("model.ratios must be non-empty");
        if (channels.size() != ratios.size() || cheb_order.size() != ratios.size())
            throw ValidationError("model.channels and model.cheb_order need one entry per ratio (" +
                                  std::to_string(ratios.size()) + ")");
        for (auto c : channels)
            if (c == 0) throw ValidationError("model.channels entries must be positive");
        for (auto k : cheb_order)
            if (k == 0) throw ValidationError("model.cheb_order entries must be >= 1");
        if (d_shape == 0 || d_pose == 0) throw ValidationError("model.d_shape and model.d_pose must be >= 1");
        if (hidden == 0) throw ValidationError("model.hidden must be positive");
        for (double w : {weights.recon, weights.kl, weights.swap, weights.reg, weights.xcov})
            if (!(w >= 0.0)) throw ValidationError("model.weights entries must be >= 0");
        if (!(beta_warmup_fraction >= 0.0 && beta_warmup_fraction <= 1.0))
            throw ValidationError("model.beta_warmup_fraction must be in [0, 1]");
        if (!(logvar_clamp > 0.0)) throw ValidationError("model.logvar_clamp must be positive");
    }

    nlohmann::json to_json() const {
        return {{"ratios", ratios},
                {"channels", channels},
                {"cheb_order", cheb_order},
                {"hidden", hidden},
                {"d_shape", d_shape},
                {"d_pose", d_pose},
                {"weights",
                 {{"recon", weights.recon}, {"kl", weights.kl}, {"swap", weights.swap}, {"reg", weights.reg}, {"xcov", weights.xcov}}},
                {"beta_warmup_fraction", beta_warmup_fraction},
                {"logvar_clamp", logvar_clamp}};
    }

    /// Missing keys keep their defaults; unknown keys are an error.
    static ModelConfig from_json(const nlohmann::json& j) {
        constexpr std::string_view ctx = "model";
        reject_unknown_keys(j, {"ratios", "channels", "cheb_order", "hidden", "d_shape", "d_pose", "weights",
                                "beta_warmup_fraction", "logvar_clamp"},
                            ctx);
        ModelConfig c;
        read_optional(j, "ratios", c.ratios, ctx);
        read_optional(j, "channels", c.channels, ctx);
        read_optional(j, "cheb_order", c.cheb_order, ctx);
        read_optional(j, "hidden", c.hidden, ctx);
        read_optional(j, "d_shape", c.d_shape, ctx);
        read_optional(j, "d_pose", c.d_pose, ctx);
        read_optional(j, "beta_warmup_fraction", c.beta_warmup_fraction, ctx);
        read_optional(j, "logvar_clamp", c.logvar_clamp, ctx);
        if (j.contains("weights")) {
            const auto& w = j["weights"];
            constexpr std::string_view wctx = "model.weights";
            reject_unknown_keys(w, {"recon", "kl", "swap", "reg", "xcov"}, wctx);
            read_optional(w, "recon", c.weights.recon, wctx);
            read_optional(w, "kl", c.weights.kl, wctx);
            read_optional(w, "swap", c.weights.swap, wctx);
            read_optional(w, "reg", c.weights.reg, wctx);
            read_optional(w, "xcov", c.weights.xcov, wctx);
        }
        c.validate();
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Chebyshev coefficients stored as a (K * C_in) x C_out matrix, i.e. the
/// K x C_in x C_out tensor in row-major order, plus a 1 x C_out bias.
template <typename T>
struct ChebLayerParams {
    ag::Tensor<T> theta;
    ag::Tensor<T> bias;
};

template <typename T>
struct DenseParams {
    ag::Tensor<T> weight;  // in x out
    ag::Tensor<T> bias;    // 1 x out
};

namespace detail {

/// 2 S a - b for N x W operands.
template <typename T>
ag::Tensor<T> cheb_step(const SparseMatrix& s, const ag::Tensor<T>& a, const ag::Tensor<T>& b) {
    const auto n = s.rows(), w = a.cols();
    const auto rp = s.row_ptr();
    const auto ci = s.col_indices();
    const auto sv = s.values();
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    ag::Buffer<T> out(n * w, T(0));
    for (std::size_t r = 0; r < n; ++r)
        for (auto k = rp[r]; k < rp[r + 1]; ++k)
            ag::detail::axpy(w, static_cast<T>(2 * sv[k]), av.data() + ci[k] * w, out.data() + r * w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return ag::make_result<T>("cheb_step", n, w, std::move(out), {an, bn}, [an, bn, &s, n, w](ag::Node<T>& self) {
        const auto rp = s.row_ptr();
        const auto ci = s.col_indices();
        const auto sv = s.values();
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t r = 0; r < n; ++r)
                for (auto k = rp[r]; k < rp[r + 1]; ++k)
                    ag::detail::axpy(w, static_cast<T>(2 * sv[k]), self.grad.data() + r * w, ga.data() + ci[k] * w);
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
        }
    });
}

}  // namespace detail

/// y = sum_k T_k(L~) x theta_k + bias with T_0 x = x, T_1 x = L~ x and
/// T_k x = 2 L~ T_{k-1} x - T_{k-2} x.
///
/// A batch of B signals is stacked vertex-major: row v * B + b holds vertex
/// v of sample b, so the Laplacian acts on an N x (B * C_in) block.
/// `laplacian` must outlive the graph.
template <typename T>
ag::Tensor<T> cheb_conv(const ag::Tensor<T>& x, const SparseMatrix& laplacian, const ChebLayerParams<T>& p) {
    const auto cin = x.cols();
    const auto n = laplacian.rows();
    if (n == 0 || x.rows() % n != 0)
        throw ValidationError("cheb_conv: input with " + std::to_string(x.rows()) + " rows does not match a " +
                              std::to_string(n) + "-vertex Laplacian");
    if (cin == 0 || p.theta.rows() % cin != 0 || p.theta.rows() == 0)
        throw ValidationError("cheb_conv: theta " + p.theta.shape() + " incompatible with " + std::to_string(cin) +
                              " input channels");
    if (p.bias.rows() != 1 || p.bias.cols() != p.theta.cols())
        throw ValidationError("cheb_conv: bias " + p.bias.shape() + " does not match theta " + p.theta.shape());
    const auto order = p.theta.rows() / cin;
    const auto width = x.rows() / n * cin;
    std::vector<ag::Tensor<T>> basis{ag::reshape(x, n, width)};
    if (order > 1) basis.push_back(ag::spmm(laplacian, basis[0]));
    for (std::size_t k = 2; k < order; ++k) basis.push_back(detail::cheb_step(laplacian, basis[k - 1], basis[k - 2]));
    for (auto& b : basis) b = ag::reshape(b, x.rows(), cin);
    auto stacked = order == 1 ? x : ag::concat_cols(basis);
    return ag::add(ag::matmul(stacked, p.theta), p.bias);
}

template <typename T>
ag::Tensor<T> dense(const ag::Tensor<T>& x, const DenseParams<T>& p) {
    return ag::add(ag::matmul(x, p.weight), p.bias);
}

/// Batch of diagonal Gaussians, one row per sample.
template <typename T>
struct GaussianPosterior {
    ag::Tensor<T> mu;      // B x (d_s + d_p)
    ag::Tensor<T> logvar;  // B x (d_s + d_p), clamped
};

/// Single latent code split into its two subspaces.
struct LatentCode {
    std::vector<double> z_shape;
    std::vector<double> z_pose;

    std::vector<double> concat() const {
        std::vector<double> z = z_shape;
        z.insert(z.end(), z_pose.begin(), z_pose.end());
        return z;
    }
    static LatentCode split(const std::vector<double>& z, std::size_t d_shape) {
        if (d_shape > z.size()) throw ValidationError("latent split: d_shape exceeds code length");
        return {std::vector<double>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(d_shape)),
                std::vector<double>(z.begin() + static_cast<std::ptrdiff_t>(d_shape), z.end())};
    }
    friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, ag::Tensor<T>>>;

/// Disentangled mesh VAE over a fixed hierarchy. Works in normalized vertex
/// coordinates; see checkpoint.hpp for the de-normalizing wrapper.
template <typename T>
class MeshVAE {
public:
    MeshVAE(ModelConfig config, std::shared_ptr<const MeshHierarchy> hierarchy, std::uint64_t seed)
        : config_(std::move(config)), hierarchy_(std::move(hierarchy)) {
        config_.validate();
        if (!hierarchy_ || hierarchy_->levels.size() != config_.ratios.size() + 1)
            throw ValidationError("hierarchy has " + std::to_string(hierarchy_ ? hierarchy_->levels.size() : 0) +
                                  " levels; config expects " + std::to_string(config_.ratios.size() + 1));
        std::uint64_t layer = 0;
        const auto levels = config_.ratios.size();
        std::size_t cin = 3;
        for (std::size_t l = 0; l < levels; ++l) {
            enc_conv_.push_back(make_cheb(config_.cheb_order[l], cin, config_.channels[l], seed, layer++));
            cin = config_.channels[l];
        }
        const auto coarse_n = hierarchy_->levels.back().vertex_count;
        const auto flat = coarse_n * config_.channels.back();
        const auto d = config_.latent_dim();
        enc_fc1_ = make_dense(flat, config_.hidden, seed, layer++);
        enc_fc2_ = make_dense(config_.hidden, 2 * d, seed, layer++, /*zero=*/true);
        dec_fc1_ = make_dense(d, config_.hidden, seed, layer++);
        dec_fc2_ = make_dense(config_.hidden, flat, seed, layer++);
        // dec_conv_[l] runs at level l after upsampling from l + 1.
        dec_conv_.resize(levels);
        for (std::size_t l = levels; l-- > 0;) {
            const auto in = config_.channels[l];
            const auto out = l == 0 ? 3 : config_.channels[l - 1];
            dec_conv_[l] = make_cheb(config_.cheb_order[l], in, out, seed, layer++);
        }
        shape_head_ = make_dense(config_.d_shape, kShapeFactorDim, seed, layer++);
        pose_head_ = make_dense(config_.d_pose, kPoseFactorDim, seed, layer++);
    }

    const ModelConfig& config() const { return config_; }
    const MeshHierarchy& hierarchy() const { return *hierarchy_; }
    std::shared_ptr<const MeshHierarchy> hierarchy_ptr() const { return hierarchy_; }
    std::size_t vertex_count() const { return hierarchy_->levels.front().vertex_count; }

    /// Every trainable tensor in a fixed order with stable names.
    NamedParams<T> parameters() const {
        NamedParams<T> out;
        auto cheb = [&](const std::string& name, const ChebLayerParams<T>& p) {
            out.emplace_back(name + ".theta", p.theta);
            out.emplace_back(name + ".bias", p.bias);
        };
        auto fc = [&](const std::string& name, const DenseParams<T>& p) {
            out.emplace_back(name + ".weight", p.weight);
            out.emplace_back(name + ".bias", p.bias);
        };
        for (std::size_t l = 0; l < enc_conv_.size(); ++l) cheb("enc.conv" + std::to_string(l), enc_conv_[l]);
        fc("enc.fc1", enc_fc1_);
        fc("enc.fc2", enc_fc2_);
        fc("dec.fc1", dec_fc1_);
        fc("dec.fc2", dec_fc2_);
        for (std::size_t l = 0; l < dec_conv_.size(); ++l) cheb("dec.conv" + std::to_string(l), dec_conv_[l]);
        fc("head.shape", shape_head_);
        fc("head.pose", pose_head_);
        return out;
    }

    /// vertices: (B * N) x 3 in normalized coordinates.
    GaussianPosterior<T> encode(const ag::Tensor<T>& vertices) const {
        const auto n0 = vertex_count();
        if (vertices.cols() != 3 || vertices.rows() == 0 || vertices.rows() % n0 != 0)
            throw ValidationError("encode: expected (B*" + std::to_string(n0) + ")x3 vertices, got " + vertices.shape());
        const auto batch = vertices.rows() / n0;
        auto x = interleave(vertices, batch, n0);
        for (std::size_t l = 0; l < enc_conv_.size(); ++l) {
            const auto& lv = hierarchy_->levels[l];
            x = ag::elu(cheb_conv(x, lv.laplacian, enc_conv_[l]));
            x = resample(lv.downsample, x, batch);
        }
        x = deinterleave(x, batch, hierarchy_->levels.back().vertex_count);
        x = ag::reshape(x, batch, x.size() / batch);
        auto h = ag::elu(dense(x, enc_fc1_));
        auto out = dense(h, enc_fc2_);
        const auto d = config_.latent_dim();
        const T lim = static_cast<T>(config_.logvar_clamp);
        return {ag::slice_cols(out, 0, d), ag::clamp(ag::slice_cols(out, d, 2 * d), -lim, lim)};
    }

    /// z: B x (d_s + d_p). Returns (B * N) x 3 normalized vertices.
    ag::Tensor<T> decode(const ag::Tensor<T>& z) const {
        if (z.cols() != config_.latent_dim() || z.rows() == 0)
            throw ValidationError("decode: expected Bx" + std::to_string(config_.latent_dim()) + " codes, got " + z.shape());
        const auto batch = z.rows();
        auto h = ag::elu(dense(z, dec_fc1_));
        auto x = dense(h, dec_fc2_);
        const auto levels = dec_conv_.size();
        const auto coarse_n = hierarchy_->levels.back().vertex_count;
        x = interleave(ag::reshape(x, batch * coarse_n, config_.channels.back()), batch, coarse_n);
        for (std::size_t l = levels; l-- > 0;) {
            const auto& lv = hierarchy_->levels[l];
            x = resample(lv.upsample, x, batch);
            x = cheb_conv(x, lv.laplacian, dec_conv_[l]);
            if (l > 0) x = ag::elu(x);
        }
        return deinterleave(x, batch, vertex_count());
    }

    ag::Tensor<T> predict_shape_factors(const ag::Tensor<T>& z_shape) const { return dense(z_shape, shape_head_); }
    ag::Tensor<T> predict_pose_factors(const ag::Tensor<T>& z_pose) const { return dense(z_pose, pose_head_); }

    ag::Tensor<T> shape_part(const ag::Tensor<T>& z) const { return ag::slice_cols(z, 0, config_.d_shape); }
    ag::Tensor<T> pose_part(const ag::Tensor<T>& z) const {
        return ag::slice_cols(z, config_.d_shape, config_.latent_dim());
    }

private:
    // Sample-major (row b * n + v) to vertex-major (row v * batch + b).
    static ag::Tensor<T> interleave(const ag::Tensor<T>& x, std::size_t batch, std::size_t n) {
        if (batch == 1) return x;
        std::vector<std::size_t> idx(batch * n);
        for (std::size_t v = 0; v < n; ++v)
            for (std::size_t b = 0; b < batch; ++b) idx[v * batch + b] = b * n + v;
        return ag::select_rows(x, std::move(idx));
    }

    static ag::Tensor<T> deinterleave(const ag::Tensor<T>& x, std::size_t batch, std::size_t n) {
        if (batch == 1) return x;
        std::vector<std::size_t> idx(batch * n);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t v = 0; v < n; ++v) idx[b * n + v] = v * batch + b;
        return ag::select_rows(x, std::move(idx));
    }

    // Applies a level transfer operator to vertex-major features.
    static ag::Tensor<T> resample(const SparseMatrix& op, const ag::Tensor<T>& x, std::size_t batch) {
        const auto c = x.cols();
        auto y = ag::spmm(op, ag::reshape(x, op.cols(), batch * c));
        return ag::reshape(y, op.rows() * batch, c);
    }

    ChebLayerParams<T> make_cheb(std::size_t order, std::size_t cin, std::size_t cout, std::uint64_t seed,
                                 std::uint64_t layer) const {
        return {init_uniform(order * cin, cout, order * cin, seed, layer), ag::Tensor<T>::zeros(1, cout, true)};
    }

    DenseParams<T> make_dense(std::size_t in, std::size_t out, std::uint64_t seed, std::uint64_t layer,
                              bool zero = false) const {
        auto w = zero ? ag::Tensor<T>::zeros(in, out, true) : init_uniform(in, out, in, seed, layer);
        return {w, ag::Tensor<T>::zeros(1, out, true)};
    }

    /// Zero-mean uniform with variance 1 / fan_in.
    static ag::Tensor<T> init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, std::uint64_t seed,
                                      std::uint64_t layer) {
        CounterRng rng(seed, {0x1417, layer});
        const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
        std::vector<T> v(rows * cols);
        for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
        return ag::Tensor<T>::from_values(rows, cols, std::move(v), true);
    }

    ModelConfig config_;
    std::shared_ptr<const MeshHierarchy> hierarchy_;
    std::vector<ChebLayerParams<T>> enc_conv_;
    DenseParams<T> enc_fc1_, enc_fc2_, dec_fc1_, dec_fc2_;
    std::vector<ChebLayerParams<T>> dec_conv_;
    DenseParams<T> shape_head_, pose_head_;
};

/// z = mu + exp(logvar / 2) * eps.
template <typename T>
ag::Tensor<T> reparameterize(const GaussianPosterior<T>& post, const ag::Tensor<T>& noise) {
    if (noise.rows() != post.mu.rows() || noise.cols() != post.mu.cols())
        throw ValidationError("reparameterize: noise " + noise.shape() + " does not match posterior " + post.mu.shape());
    return ag::add(post.mu, ag::mul(ag::exp(ag::scale(post.logvar, T(0.5))), noise));
}

/// KL(q || N(0, I)) summed over latent dimensions, averaged over the batch.
template <typename T>
ag::Tensor<T> kl_divergence(const GaussianPosterior<T>& post) {
    // -1/2 * sum(1 + logvar - mu^2 - exp(logvar)) = 1/2 * sum(mu^2 + exp(logvar) - 1 - logvar)
    auto inner = ag::sub(ag::add(ag::square(post.mu), ag::exp(post.logvar)), post.logvar);
    const auto batch = static_cast<T>(post.mu.rows());
    const auto count = static_cast<T>(post.mu.size());
    return ag::scale(ag::sub(ag::sum(inner), ag::Tensor<T>::scalar(count)), T(0.5) / batch);
}

/// Mean over vertices of the per-vertex L1 norm of the error.
template <typename T>
ag::Tensor<T> vertex_l1(const ag::Tensor<T>& predicted, const ag::Tensor<T>& target) {
    if (predicted.cols() != 3) throw ValidationError("vertex_l1: expected 3 columns, got " + predicted.shape());
    return ag::scale(ag::sum(ag::abs(ag::sub(predicted, target))), T(1) / static_cast<T>(predicted.rows()));
}

/// Squared Frobenius norm of the batch cross-covariance of the two
/// subspaces (mean-centered), divided by the batch size.
template <typename T>
ag::Tensor<T> cross_covariance_penalty(const ag::Tensor<T>& z_shape, const ag::Tensor<T>& z_pose) {
    const auto batch = static_cast<T>(z_shape.rows());
    auto cs = ag::sub(z_shape, ag::mean_rows(z_shape));
    auto cp = ag::sub(z_pose, ag::mean_rows(z_pose));
    auto cov = ag::scale(ag::matmul(ag::transpose(cs), cp), T(1) / batch);
    return ag::scale(ag::sum(ag::square(cov)), T(1) / batch);
}

/// Training batch in normalized coordinates with its pairing structure.
/// same_subject holds (A, B): same shape, different pose; same_pose holds
/// (C, D): different subjects, identical pose.
template <typename T>
struct PairedBatch {
    ag::Tensor<T> vertices;        // (B * N) x 3
    ag::Tensor<T> shape_targets;   // B x kShapeFactorDim, normalized
    ag::Tensor<T> pose_targets;    // B x kPoseFactorDim, normalized
    std::vector<std::pair<std::size_t, std::size_t>> same_subject;
    std::vector<std::pair<std::size_t, std::size_t>> same_pose;

    std::size_t size() const { return shape_targets.rows(); }
};

template <typename T>
struct DisentangleLosses {
    ag::Tensor<T> swap;
    ag::Tensor<T> reg;
    ag::Tensor<T> xcov;
};

namespace detail {

template <typename T>
ag::Tensor<T> rows_of(const ag::Tensor<T>& x, std::size_t n, const std::vector<std::size_t>& samples) {
    std::vector<std::size_t> idx;
    idx.reserve(samples.size() * n);
    for (auto s : samples)
        for (std::size_t v = 0; v < n; ++v) idx.push_back(s * n + v);
    return ag::select_rows(x, std::move(idx));
}

template <typename T>
void check_pairs(const PairedBatch<T>& batch) {
    if (batch.same_subject.empty() || batch.same_pose.empty())
        throw ValidationError("disentangle_losses: batch needs both same-subject and same-pose pairs");
    for (const auto* list : {&batch.same_subject, &batch.same_pose})
        for (auto [a, b] : *list)
            if (a >= batch.size() || b >= batch.size()) throw ValidationError("disentangle_losses: pair index out of range");
}

template <typename T>
ag::Tensor<T> swap_loss(const PairedBatch<T>& batch, const MeshVAE<T>& model, const ag::Tensor<T>& mu) {
    check_pairs(batch);
    std::vector<std::size_t> shape_src, pose_src, target;
    for (auto [a, b] : batch.same_subject) {
        shape_src.push_back(a);
        pose_src.push_back(b);
        target.push_back(b);
    }
    for (auto [c, d] : batch.same_pose) {
        shape_src.push_back(c);
        pose_src.push_back(d);
        target.push_back(c);
    }
    auto z = ag::concat_cols<T>({ag::select_rows(model.shape_part(mu), shape_src), ag::select_rows(model.pose_part(mu), pose_src)});
    auto decoded = model.decode(z);
    return vertex_l1(decoded, rows_of(batch.vertices, model.vertex_count(), target));
}

template <typename T>
ag::Tensor<T> regression_loss(const PairedBatch<T>& batch, const MeshVAE<T>& model, const ag::Tensor<T>& mu) {
    auto ds = ag::sub(model.predict_shape_factors(model.shape_part(mu)), batch.shape_targets);
    auto dp = ag::sub(model.predict_pose_factors(model.pose_part(mu)), batch.pose_targets);
    return ag::add(ag::mean(ag::square(ds)), ag::mean(ag::square(dp)));
}

}  // namespace detail

/// Swap, factor-regression and cross-covariance losses at the posterior means.
template <typename T>
DisentangleLosses<T> disentangle_losses(const PairedBatch<T>& batch, const MeshVAE<T>& model) {
    detail::check_pairs(batch);
    auto post = model.encode(batch.vertices);
    return {detail::swap_loss(batch, model, post.mu), detail::regression_loss(batch, model, post.mu),
            cross_covariance_penalty(model.shape_part(post.mu), model.pose_part(post.mu))};
}

/// beta ramps linearly from 0 at epoch 0 to 1 at warmup_fraction * total_epochs.
inline double beta_schedule(std::size_t epoch, std::size_t total_epochs, double warmup_fraction) {
    const double warm = warmup_fraction * static_cast<double>(total_epochs);
    if (warm <= 0.0) return 1.0;
    return std::min(1.0, static_cast<double>(epoch) / warm);
}

template <typename T>
struct LossBreakdown {
    ag::Tensor<T> total;
    double recon = 0, kl = 0, swap = 0, reg = 0, xcov = 0;
    double beta = 0;
    // Weighted contributions; they sum to `total`.
    double w_recon = 0, w_kl = 0, w_swap = 0, w_reg = 0, w_xcov = 0;

    double total_value() const { return static_cast<double>(total.item()); }
};

/// w_recon * L1 + w_kl * beta * KL + w_swap * swap + w_reg * reg + w_xcov * xcov.
/// Reconstruction uses the reparameterized sample z = mu + sigma * noise;
/// the disentanglement terms use posterior means. Terms whose weight is
/// zero are skipped (and reported as 0).
template <typename T>
LossBreakdown<T> total_loss(const PairedBatch<T>& batch, const MeshVAE<T>& model, std::size_t epoch,
                            std::size_t total_epochs, const ag::Tensor<T>& noise) {
    const auto& cfg = model.config();
    const auto& w = cfg.weights;
    LossBreakdown<T> out;
    out.beta = beta_schedule(epoch, total_epochs, cfg.beta_warmup_fraction);
    auto post = model.encode(batch.vertices);
    std::vector<std::pair<ag::Tensor<T>, double>> terms;

    if (w.recon > 0) {
        auto recon = vertex_l1(model.decode(reparameterize(post, noise)), batch.vertices);
        out.recon = recon.item();
        terms.push_back({recon, w.recon});
    }
    {
        auto kl = kl_divergence(post);
        out.kl = kl.item();
        if (w.kl * out.beta > 0) terms.push_back({kl, w.kl * out.beta});
    }
    if (w.swap > 0) {
        auto swap = detail::swap_loss(batch, model, post.mu);
        out.swap = swap.item();
        terms.push_back({swap, w.swap});
    }
    if (w.reg > 0) {
        auto reg = detail::regression_loss(batch, model, post.mu);
        out.reg = reg.item();
        terms.push_back({reg, w.reg});
    }
    if (w.xcov > 0) {
        auto xcov = cross_covariance_penalty(model.shape_part(post.mu), model.pose_part(post.mu));
        out.xcov = xcov.item();
        terms.push_back({xcov, w.xcov});
    }
    if (terms.empty()) throw ValidationError("total_loss: every loss weight is zero");

    std::vector<ag::Tensor<T>> scaled;
    for (auto& [t, weight] : terms) scaled.push_back(ag::scale(t, static_cast<T>(weight)));
    auto total = scaled[0];
    for (std::size_t i = 1; i < scaled.size(); ++i) total = ag::add(total, scaled[i]);
    out.total = total;
    out.w_recon = w.recon * out.recon;
    out.w_kl = w.kl * out.beta * out.kl;
    out.w_swap = w.swap * out.swap;
    out.w_reg = w.reg * out.reg;
    out.w_xcov = w.xcov * out.xcov;
    return out;
}

}  // namespace dismesh
