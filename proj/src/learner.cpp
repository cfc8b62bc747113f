#include "cotrain/learner.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "cotrain/errors.hpp"

namespace cotrain {

namespace {

constexpr double kCosClamp = 1e-7;
constexpr double kCosTolerance = 1e-6;

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    // Fill in row-major order so the draw sequence matches the checkpoint layout.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

Eigen::Map<Matrix> as_column(Vector& v) { return Eigen::Map<Matrix>(v.data(), v.size(), 1); }

}  // namespace

void MarginConfig::validate() const {
    if (!(margin >= 0.0 && margin < M_PI / 2))
        throw ValidationError("margin must lie in [0, pi/2)");
    if (!(scale > 0.0)) throw ValidationError("scale must be positive");
    if (!(mv_t >= 1.0)) throw ValidationError("mv_t must be >= 1");
}

void SgdConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
    if (!(decay_factor > 0.0)) throw ValidationError("decay factor must be positive");
}

double SgdConfig::learning_rate_at(long iteration) const {
    double lr = learning_rate;
    for (long at : decay_iterations)
        if (iteration >= at) lr *= decay_factor;
    return lr;
}

SgdConfig SgdConfig::with_fraction_schedule(long total, std::span<const double> fractions) const {
    SgdConfig out = *this;
    out.decay_iterations.clear();
    for (double f : fractions)
        out.decay_iterations.push_back(static_cast<long>(std::floor(f * static_cast<double>(total))));
    return out;
}

int EncoderParams::input_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols());
}

int EncoderParams::embedding_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows());
}

std::vector<int> EncoderParams::layer_sizes() const {
    std::vector<int> sizes;
    if (layers.empty()) return sizes;
    sizes.push_back(input_dim());
    for (const auto& l : layers) sizes.push_back(static_cast<int>(l.weight.rows()));
    return sizes;
}

EncoderParams EncoderParams::random(const EncoderArch& arch, std::uint64_t seed) {
    if (arch.input_dim < 1 || arch.embedding_dim < 1)
        throw ValidationError("encoder dimensions must be positive");
    std::mt19937_64 rng(seed);
    EncoderParams p;
    int fan_in = arch.input_dim;
    std::vector<int> outs = arch.hidden_dims;
    outs.push_back(arch.embedding_dim);
    for (std::size_t i = 0; i < outs.size(); ++i) {
        if (outs[i] < 1) throw ValidationError("hidden dimension must be positive");
        const bool last = i + 1 == outs.size();
        // He init for ReLU layers, LeCun for the linear output.
        const double stddev = std::sqrt((last ? 1.0 : 2.0) / fan_in);
        p.layers.push_back({gaussian_matrix(outs[i], fan_in, stddev, rng), Vector::Zero(outs[i])});
        fan_in = outs[i];
    }
    return p;
}

EncoderParams EncoderParams::identity(int dim) {
    EncoderParams p;
    p.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim)});
    return p;
}

void ClassHead::normalize_rows() {
    for (Eigen::Index r = 0; r < weight.rows(); ++r) {
        const double n = weight.row(r).norm();
        if (n > 0.0) weight.row(r) /= n;
    }
}

void ClassHead::append_row(const Vector& direction) {
    if (weight.rows() > 0 && direction.size() != weight.cols())
        throw ValidationError("class row dimension mismatch");
    weight.conservativeResize(weight.rows() + 1, direction.size());
    weight.row(weight.rows() - 1) = direction.transpose() / direction.norm();
}

ClassHead ClassHead::random(int classes, int embedding_dim, std::uint64_t seed) {
    if (classes < 1) throw ValidationError("class count must be positive");
    std::mt19937_64 rng(seed);
    ClassHead h{gaussian_matrix(classes, embedding_dim, 1.0, rng)};
    h.normalize_rows();
    return h;
}

Agent Agent::make(const EncoderArch& arch, int classes, std::uint64_t seed) {
    Agent a;
    a.encoder = EncoderParams::random(arch, seed);
    a.head = ClassHead::random(classes, arch.embedding_dim, seed ^ 0x9e3779b97f4a7c15ULL);
    return a;
}

EncoderTrace encode_batch(const EncoderParams& params, const Matrix& x) {
    if (params.layers.empty()) throw ValidationError("encoder has no layers");
    if (x.rows() != params.input_dim())
        throw ValidationError("input dimension " + std::to_string(x.rows()) + " != " +
                              std::to_string(params.input_dim()));
    EncoderTrace t;
    t.inputs.reserve(params.layers.size());
    t.preacts.reserve(params.layers.size());
    Matrix h = x;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        t.inputs.push_back(h);
        Matrix z = layer.weight * h;
        z.colwise() += layer.bias;
        t.preacts.push_back(z);
        h = l + 1 < params.layers.size() ? Matrix(z.cwiseMax(0.0)) : z;
    }
    if (!h.allFinite()) throw NumericError("numeric overflow");
    t.norms = h.colwise().norm().transpose();
    if ((t.norms.array() <= 0.0).any()) throw NumericError("numeric overflow: zero-norm embedding");
    t.embedding = h.array().rowwise() / t.norms.transpose().array();
    return t;
}

Matrix embed_batch(const EncoderParams& params, const Matrix& x) {
    return encode_batch(params, x).embedding;
}

Vector embed(const EncoderParams& params, const Vector& x) {
    return encode_batch(params, Matrix(x)).embedding.col(0);
}

double margin_loss(const Vector& cosines, int label, const MarginConfig& cfg, LossKind kind,
                   Vector* grad_cos) {
    const Eigen::Index classes = cosines.size();
    if (label < 0 || label >= classes) throw ValidationError("label out of range");
    const double cy = cosines[label];
    if (!(std::abs(cy) <= 1.0 + kCosTolerance)) throw NumericError("target cosine outside [-1, 1]");

    const double clamped = std::clamp(cy, -1.0 + kCosClamp, 1.0 - kCosClamp);
    const double sin_theta = std::sqrt(1.0 - clamped * clamped);
    const double cos_m = std::cos(cfg.margin), sin_m = std::sin(cfg.margin);
    double target = 0.0, dtarget = 0.0;
    if (clamped > -cos_m) {
        target = clamped * cos_m - sin_theta * sin_m;  // cos(theta + m)
        dtarget = clamped == cy ? cos_m + clamped * sin_m / sin_theta : 0.0;
    } else {
        // theta + m > pi: cos(theta + m) turns back up, so continue with the
        // monotone CosFace-style target instead.
        target = cy - cfg.margin * sin_m;
        dtarget = 1.0;
    }

    Vector z(classes), dz(classes);
    for (Eigen::Index k = 0; k < classes; ++k) {
        if (k == label) {
            z[k] = cfg.scale * target;
            dz[k] = cfg.scale * dtarget;
        } else if (kind == LossKind::MV && target < cosines[k]) {
            z[k] = cfg.scale * (cfg.mv_t * cosines[k] + cfg.mv_t - 1.0);
            dz[k] = cfg.scale * cfg.mv_t;
        } else {
            z[k] = cfg.scale * cosines[k];
            dz[k] = cfg.scale;
        }
    }
    const double zmax = z.maxCoeff();
    const Vector e = (z.array() - zmax).exp().matrix();
    const double denom = e.sum();
    const double loss = std::log(denom) + zmax - z[label];
    if (grad_cos) {
        Vector p = e / denom;
        p[label] -= 1.0;
        *grad_cos = p.cwiseProduct(dz);
    }
    return loss;
}

namespace {

LossGrad head_loss(const Vector& feature, const ClassHead& head, int label, const MarginConfig& cfg,
                   LossKind kind) {
    if (feature.size() != head.embedding_dim()) throw ValidationError("feature dimension mismatch");
    const Vector cos = head.weight * feature;
    Vector gcos;
    LossGrad out;
    out.loss = margin_loss(cos, label, cfg, kind, &gcos);
    out.grad_feature = head.weight.transpose() * gcos;
    out.grad_head = gcos * feature.transpose();
    return out;
}

}  // namespace

LossGrad arc_softmax_loss(const Vector& feature, const ClassHead& head, int label,
                          const MarginConfig& cfg) {
    return head_loss(feature, head, label, cfg, LossKind::Arc);
}

LossGrad mv_softmax_loss(const Vector& feature, const ClassHead& head, int label,
                         const MarginConfig& cfg) {
    return head_loss(feature, head, label, cfg, LossKind::MV);
}

BatchLoss batch_margin_losses(const Matrix& cosines, std::span<const int> labels,
                              const MarginConfig& cfg, LossKind kind) {
    if (static_cast<Eigen::Index>(labels.size()) != cosines.cols())
        throw ValidationError("label count does not match batch");
    BatchLoss out{Vector(cosines.cols()), Matrix(cosines.rows(), cosines.cols())};
    Vector g;
    for (Eigen::Index i = 0; i < cosines.cols(); ++i) {
        out.per_sample[i] = margin_loss(cosines.col(i), labels[i], cfg, kind, &g);
        out.grad_cos.col(i) = g;
    }
    return out;
}

AgentGrads AgentGrads::zeros_like(const Agent& agent) {
    AgentGrads g;
    for (const auto& l : agent.encoder.layers)
        g.encoder.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
    g.head = Matrix::Zero(agent.head.weight.rows(), agent.head.weight.cols());
    return g;
}

bool AgentGrads::all_finite() const {
    for (const auto& l : encoder)
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return head.allFinite();
}

AgentGrads backward(const Agent& agent, const EncoderTrace& trace, const Matrix& grad_cos) {
    const Matrix& emb = trace.embedding;
    const Matrix& w = agent.head.weight;
    AgentGrads g;
    g.head = grad_cos * emb.transpose();

    const Matrix d_emb = w.transpose() * grad_cos;
    // Through f = v / |v|: dv = (df - f (f . df)) / |v|.
    const Eigen::RowVectorXd dots = emb.cwiseProduct(d_emb).colwise().sum();
    Matrix d_h = (d_emb.array() - emb.array().rowwise() * dots.array()).rowwise() /
                 trace.norms.transpose().array();

    const std::size_t n = agent.encoder.layers.size();
    g.encoder.resize(n);
    for (std::size_t li = n; li-- > 0;) {
        const auto& layer = agent.encoder.layers[li];
        Matrix d_z = li + 1 == n ? d_h
                                 : Matrix(d_h.array() * (trace.preacts[li].array() > 0.0).cast<double>());
        g.encoder[li].weight = d_z * trace.inputs[li].transpose();
        g.encoder[li].bias = d_z.rowwise().sum();
        if (li > 0) d_h = layer.weight.transpose() * d_z;
    }
    return g;
}

void sgd_update(Eigen::Ref<Matrix> param, const Matrix& grad, Matrix& velocity, double lr,
                double momentum, double weight_decay) {
    velocity = momentum * velocity + grad + weight_decay * Matrix(param);
    param -= lr * velocity;
}

void sgd_step(Agent& agent, const AgentGrads& grads, const SgdConfig& cfg, MomentumState& state,
              long iteration) {
    if (!grads.all_finite()) throw DivergedError("diverged");
    const double lr = cfg.learning_rate_at(iteration);
    for (std::size_t l = 0; l < agent.encoder.layers.size(); ++l) {
        auto& layer = agent.encoder.layers[l];
        auto& vel = state.velocity.encoder[l];
        sgd_update(layer.weight, grads.encoder[l].weight, vel.weight, lr, cfg.momentum,
                   cfg.weight_decay);
        Matrix vb = vel.bias;
        auto bias = as_column(layer.bias);
        sgd_update(bias, grads.encoder[l].bias, vb, lr, cfg.momentum, cfg.weight_decay);
        vel.bias = vb;
    }
    sgd_update(agent.head.weight, grads.head, state.velocity.head, lr, cfg.momentum,
               cfg.weight_decay);
    agent.head.normalize_rows();
}

Vector softmax(const Vector& logits) {
    const Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
    return e / e.sum();
}

Logits forward_logits(const Agent& agent, const Vector& x, const MarginConfig& cfg) {
    Logits out;
    out.cosine = agent.head.weight * embed(agent.encoder, x);
    out.posterior = softmax(cfg.scale * out.cosine);
    return out;
}

Matrix batch_cosines(const Agent& agent, const Matrix& x) {
    return agent.head.weight * embed_batch(agent.encoder, x);
}

}  // namespace cotrain
