#pragma once

// MLP encoder with unit-norm embeddings, a normalized class-weight head,
// angular-margin softmax losses and momentum SGD.
//
// Batches are column-major: a d_in x B matrix holds B samples.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cotrain {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct MarginConfig {
    double margin = 0.5;  // additive angular margin, radians
    double scale = 32.0;
    double mv_t = 1.1;    // hard-negative re-weighting factor of MV-softmax

    void validate() const;
};

struct SgdConfig {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    std::vector<long> decay_iterations;  // lr is multiplied by decay_factor at each
    double decay_factor = 0.1;

    void validate() const;
    double learning_rate_at(long iteration) const;

    /// Copy with decay milestones placed at the given fractions of `total` iterations.
    SgdConfig with_fraction_schedule(long total, std::span<const double> fractions) const;
};

struct EncoderArch {
    int input_dim = 32;
    std::vector<int> hidden_dims{64};
    int embedding_dim = 16;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;
};

/// Encoder parameters. Every layer but the last is followed by ReLU; the
/// output of the last layer is L2-normalized.
struct EncoderParams {
    std::vector<DenseLayer> layers;

    int input_dim() const;
    int embedding_dim() const;
    std::vector<int> layer_sizes() const;  // input_dim, then each layer's output

    static EncoderParams random(const EncoderArch& arch, std::uint64_t seed);
    static EncoderParams identity(int dim);
};

struct ClassHead {
    Matrix weight;  // C x d_e, rows unit-norm

    int num_classes() const { return static_cast<int>(weight.rows()); }
    int embedding_dim() const { return static_cast<int>(weight.cols()); }
    void normalize_rows();
    void append_row(const Vector& direction);

    static ClassHead random(int classes, int embedding_dim, std::uint64_t seed);
};

struct Agent {
    EncoderParams encoder;
    ClassHead head;

    static Agent make(const EncoderArch& arch, int classes, std::uint64_t seed);
};

/// Cached activations of one batch forward pass.
struct EncoderTrace {
    std::vector<Matrix> inputs;   // input to each layer
    std::vector<Matrix> preacts;  // pre-activation of each layer
    Vector norms;                 // norm of the raw output per sample
    Matrix embedding;             // d_e x B, unit columns
};

EncoderTrace encode_batch(const EncoderParams& params, const Matrix& x);
Matrix embed_batch(const EncoderParams& params, const Matrix& x);
Vector embed(const EncoderParams& params, const Vector& x);

enum class LossKind { Arc, MV };

struct LossGrad {
    double loss = 0.0;
    Vector grad_feature;  // d loss / d f
    Matrix grad_head;     // d loss / d W, C x d_e
};

/// Per-sample margin loss as a function of the cosine vector.
/// `grad_cos` receives d loss / d cos_k.
double margin_loss(const Vector& cosines, int label, const MarginConfig& cfg, LossKind kind,
                   Vector* grad_cos = nullptr);

LossGrad arc_softmax_loss(const Vector& feature, const ClassHead& head, int label,
                          const MarginConfig& cfg);
LossGrad mv_softmax_loss(const Vector& feature, const ClassHead& head, int label,
                         const MarginConfig& cfg);

struct BatchLoss {
    Vector per_sample;  // B
    Matrix grad_cos;    // C x B
};

/// Loss on every column of a cosine matrix (C x B).
BatchLoss batch_margin_losses(const Matrix& cosines, std::span<const int> labels,
                              const MarginConfig& cfg, LossKind kind);

/// Gradients with the same layout as an Agent.
struct AgentGrads {
    std::vector<DenseLayer> encoder;
    Matrix head;

    static AgentGrads zeros_like(const Agent& agent);
    bool all_finite() const;
};

/// Backpropagate d loss / d cos (C x B) through head and encoder.
AgentGrads backward(const Agent& agent, const EncoderTrace& trace, const Matrix& grad_cos);

struct MomentumState {
    AgentGrads velocity;
    explicit MomentumState(const Agent& agent) : velocity(AgentGrads::zeros_like(agent)) {}
};

/// v <- mu v + g + wd w ; w <- w - lr v.
void sgd_update(Eigen::Ref<Matrix> param, const Matrix& grad, Matrix& velocity, double lr,
                double momentum, double weight_decay);

/// One optimizer step at the given iteration of the schedule; head rows are
/// re-normalized afterwards. Throws DivergedError on a non-finite gradient.
void sgd_step(Agent& agent, const AgentGrads& grads, const SgdConfig& cfg,
              MomentumState& state, long iteration);

struct Logits {
    Vector cosine;
    Vector posterior;  // softmax over scale * cosine
};

Logits forward_logits(const Agent& agent, const Vector& x, const MarginConfig& cfg);
Matrix batch_cosines(const Agent& agent, const Matrix& x);
Vector softmax(const Vector& logits);

}  // namespace cotrain
