#include "cotrain/groupnet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <json.hpp>

#include "cotrain/errors.hpp"
#include "cotrain/parallel.hpp"
#include "cotrain/seeding.hpp"

namespace cotrain {

void GroupConfig::validate() const {
    if (agents < 2) throw ValidationError("agent count M must be >= 2");
    if (degree < 1 || degree > agents - 1) throw ValidationError("exchange degree must lie in 1..M-1");
    if (!(noise_percent >= 0.0 && noise_percent < 100.0)) throw ValidationError("noise rate must lie in [0, 100)");
    if (batch_size < agents) throw ValidationError("batch size must be >= M");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ValidationError("warmup fraction must lie in [0, 1)");
    for (double f : lr_decay_fractions)
        if (!(f > 0.0 && f < 1.0)) throw ValidationError("lr decay fractions must lie in (0, 1)");
    margin.validate();
    sgd.validate();
}

int low_confidence_count(double r_percent, int batch) {
    // The epsilon absorbs representation error such as 0.3 * 10 = 2.9999...
    return static_cast<int>(std::floor(r_percent / 100.0 * batch + 1e-9));
}

BatchPartition partition_batch(const Matrix& losses, double r_percent) {
    const int agents = static_cast<int>(losses.rows());
    const int batch = static_cast<int>(losses.cols());
    if (batch == 0 || agents == 0) throw ValidationError("empty batch");
    if (!losses.allFinite()) throw ValidationError("non-finite loss in batch");
    if (!(r_percent >= 0.0 && r_percent < 100.0)) throw ValidationError("noise rate must lie in [0, 100)");

    const int k = low_confidence_count(r_percent, batch);
    BatchPartition p;
    p.lc.resize(agents);
    p.mc.resize(agents);
    std::vector<int> lc_votes(batch, 0);
    std::vector<int> order(batch);
    for (int m = 0; m < agents; ++m) {
        std::iota(order.begin(), order.end(), 0);
        // Largest loss first; equal losses put the lower position in LC first.
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return losses(m, a) > losses(m, b); });
        p.lc[m].assign(order.begin(), order.begin() + k);
        std::sort(p.lc[m].begin(), p.lc[m].end());
        for (int i : p.lc[m]) ++lc_votes[i];
    }
    for (int i = 0; i < batch; ++i)
        if (lc_votes[i] == 0) p.hc.push_back(i);
    for (int m = 0; m < agents; ++m) {
        std::vector<char> in_lc(batch, 0);
        for (int i : p.lc[m]) in_lc[i] = 1;
        for (int i = 0; i < batch; ++i)
            if (!in_lc[i] && lc_votes[i] > 0) p.mc[m].push_back(i);
    }
    return p;
}

std::string check_partition(const BatchPartition& p, int batch, double r_percent) {
    const std::size_t agents = p.lc.size();
    if (p.mc.size() != agents) return "lc/mc agent count mismatch";
    const int k = low_confidence_count(r_percent, batch);
    std::vector<int> kept_by_all(batch, 1);
    for (std::size_t m = 0; m < agents; ++m) {
        if (static_cast<int>(p.lc[m].size()) != k) return "agent " + std::to_string(m) + ": |LC| != floor(rB/100)";
        std::vector<int> hits(batch, 0);
        for (int i : p.lc[m]) {
            if (i < 0 || i >= batch) return "LC index out of range";
            ++hits[i];
            kept_by_all[i] = 0;
        }
        for (int i : p.mc[m]) {
            if (i < 0 || i >= batch) return "MC index out of range";
            ++hits[i];
        }
        for (int i : p.hc) {
            if (i < 0 || i >= batch) return "HC index out of range";
            ++hits[i];
        }
        for (int i = 0; i < batch; ++i)
            if (hits[i] != 1) return "agent " + std::to_string(m) + ": LC/MC/HC do not tile the batch at " + std::to_string(i);
    }
    std::vector<int> expected_hc;
    for (int i = 0; i < batch; ++i)
        if (kept_by_all[i]) expected_hc.push_back(i);
    std::vector<int> hc = p.hc;
    std::sort(hc.begin(), hc.end());
    if (hc != expected_hc) return "HC != intersection of non-LC sets";
    return {};
}

std::vector<int> ExchangePlan::senders_of(int agent) const {
    const int agents = static_cast<int>(seat.size());
    int pos = 0;
    while (seat[pos] != agent) ++pos;
    std::vector<int> out;
    for (int d = 1; d < agents; ++d) {
        const int s = seat[((pos - d) % agents + agents) % agents];
        if (std::find(recipients[s].begin(), recipients[s].end(), agent) != recipients[s].end())
            out.push_back(s);
    }
    return out;
}

ExchangePlan plan_from_seating(std::vector<int> seat, int degree) {
    const int agents = static_cast<int>(seat.size());
    if (agents < 2) throw ValidationError("exchange needs >= 2 agents");
    if (degree < 1 || degree >= agents) throw ValidationError("exchange degree must lie in 1..M-1");
    ExchangePlan plan;
    plan.recipients.resize(agents);
    for (int p = 0; p < agents; ++p)
        for (int d = 1; d <= degree; ++d) plan.recipients[seat[p]].push_back(seat[(p + d) % agents]);
    plan.seat = std::move(seat);
    return plan;
}

ExchangePlan make_exchange_plan(const GroupConfig& cfg, std::mt19937_64& rng) {
    if (cfg.agents < 2) throw ValidationError("exchange needs >= 2 agents");
    if (cfg.degree >= cfg.agents) throw ValidationError("exchange degree must be < M");
    std::vector<int> seat(cfg.agents);
    std::iota(seat.begin(), seat.end(), 0);
    if (cfg.shuffle && cfg.degree < cfg.agents - 1) std::shuffle(seat.begin(), seat.end(), rng);
    return plan_from_seating(std::move(seat), cfg.degree);
}

std::vector<int> select_received_mc(const Recommendations& received, std::size_t own_mc_size,
                                    const Matrix& losses) {
    struct Tally {
        int count = 0;
        double loss_sum = 0.0;
    };
    std::map<int, Tally> tally;
    for (const auto& [sender, indices] : received) {
        std::vector<int> unique = indices;
        std::sort(unique.begin(), unique.end());
        unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
        for (int i : unique) {
            auto& t = tally[i];
            ++t.count;
            t.loss_sum += losses(sender, i);
        }
    }
    std::vector<std::tuple<int, double, int>> ranked;  // (-count, mean loss, index)
    ranked.reserve(tally.size());
    for (const auto& [i, t] : tally) ranked.emplace_back(-t.count, t.loss_sum / t.count, i);
    std::sort(ranked.begin(), ranked.end());
    std::vector<int> out;
    for (std::size_t k = 0; k < ranked.size() && k < own_mc_size; ++k) out.push_back(std::get<2>(ranked[k]));
    std::sort(out.begin(), out.end());
    return out;
}

GroupLoss group_loss(const Agent& agent, const EncoderTrace& trace, const Matrix& cosines,
                     std::span<const int> labels, std::span<const int> hc, std::span<const int> mc,
                     const MarginConfig& cfg) {
    GroupLoss out;
    out.effective = hc.size() + mc.size();
    if (out.empty()) return out;
    const double norm = 1.0 / static_cast<double>(out.effective);
    Matrix grad_cos = Matrix::Zero(cosines.rows(), cosines.cols());
    Vector g;
    auto accumulate = [&](std::span<const int> cols, LossKind kind) {
        for (int i : cols) {
            out.loss += margin_loss(cosines.col(i), labels[i], cfg, kind, &g);
            grad_cos.col(i) += norm * g;
        }
    };
    accumulate(hc, LossKind::MV);
    accumulate(mc, LossKind::Arc);
    out.loss *= norm;
    out.grads = backward(agent, trace, grad_cos);
    return out;
}

GroupLoss group_loss(const Agent& agent, const Matrix& x, std::span<const int> labels,
                     std::span<const int> hc, std::span<const int> mc, const MarginConfig& cfg) {
    const EncoderTrace trace = encode_batch(agent.encoder, x);
    const Matrix cosines = agent.head.weight * trace.embedding;
    return group_loss(agent, trace, cosines, labels, hc, mc, cfg);
}

std::string IterationLog::to_json() const {
    nlohmann::json j;
    j["iteration"] = iteration;
    j["warmup"] = warmup;
    j["noise_percent"] = noise_percent;
    j["mean_loss"] = mean_loss;
    j["hc"] = hc_size;
    j["mc"] = mc_sizes;
    j["mc_selected"] = mc_selected;
    j["permutation"] = permutation;
    j["skipped"] = skipped;
    if (batch_noisy_fraction >= 0.0) {
        j["batch_noisy_fraction"] = batch_noisy_fraction;
        j["hc_noisy_fraction"] = hc_noisy_fraction;
    }
    return j.dump();
}

std::vector<int> BatchSampler::next(int batch_size, std::mt19937_64& rng) {
    if (size_ == 0) throw ValidationError("cannot sample from an empty dataset");
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(batch_size), size_);
    if (order_.empty() || pos_ + b > order_.size()) {
        order_.resize(size_);
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng);
        pos_ = 0;
    }
    std::vector<int> out(order_.begin() + static_cast<long>(pos_), order_.begin() + static_cast<long>(pos_ + b));
    pos_ += b;
    return out;
}

GroupTrainer::GroupTrainer(GroupConfig cfg, std::vector<Agent> agents)
    : cfg_(std::move(cfg)), agents_(std::move(agents)), rng_(derive_seed(cfg_.seed, 7001)) {
    cfg_.validate();
    if (static_cast<int>(agents_.size()) != cfg_.agents)
        throw ValidationError("agent count does not match configuration");
}

void GroupTrainer::set_noise_percent(double r) {
    if (!(r >= 0.0 && r < 100.0)) throw ValidationError("noise rate must lie in [0, 100)");
    cfg_.noise_percent = r;
}

void GroupTrainer::set_warmup_fraction(double w) {
    if (!(w >= 0.0 && w < 1.0)) throw ValidationError("warmup fraction must lie in [0, 1)");
    cfg_.warmup_fraction = w;
}

namespace {

struct AgentForward {
    EncoderTrace trace;
    Matrix cosines;
    BatchLoss arc;
};

double noisy_fraction(const LabelledSet& data, std::span<const int> batch, std::span<const int> positions) {
    if (positions.empty()) return 0.0;
    int noisy = 0;
    for (int p : positions) noisy += data.is_noisy(static_cast<std::size_t>(batch[p])) ? 1 : 0;
    return static_cast<double>(noisy) / static_cast<double>(positions.size());
}

bool has_ground_truth(const LabelledSet& data) {
    return std::any_of(data.gt_labels.begin(), data.gt_labels.end(), [](int g) { return g != kNoLabel; });
}

SgdConfig resolve_schedule(const GroupConfig& cfg, long iterations) {
    if (cfg.lr_decay_fractions.empty()) return cfg.sgd;
    return cfg.sgd.with_fraction_schedule(iterations, cfg.lr_decay_fractions);
}

}  // namespace

std::vector<IterationLog> GroupTrainer::train(const LabelledSet& data, long iterations, const TrainHooks& hooks) {
    if (data.empty()) throw ValidationError("training set is empty");
    for (const auto& a : agents_)
        if (a.head.num_classes() != data.num_classes)
            throw ValidationError("class head size does not match dataset class count");

    const int agents = cfg_.agents;
    const SgdConfig sgd = resolve_schedule(cfg_, iterations);
    const long warmup = static_cast<long>(std::floor(cfg_.warmup_fraction * static_cast<double>(iterations)));
    const bool truth = has_ground_truth(data);

    std::vector<MomentumState> momentum;
    for (const auto& a : agents_) momentum.emplace_back(a);
    BatchSampler sampler(data.size());
    std::vector<AgentForward> fwd(agents);
    std::vector<IterationLog> logs;
    logs.reserve(static_cast<std::size_t>(iterations));

    for (long it = 0; it < iterations; ++it) {
        if (it == warmup && hooks.after_warmup) {
            if (auto r = hooks.after_warmup(agents_)) set_noise_percent(*r);
        }
        const std::vector<int> batch = sampler.next(cfg_.batch_size, rng_);
        const Matrix x = data.gather(batch);
        std::vector<int> labels(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = data.labels[batch[i]];
        const int b = static_cast<int>(batch.size());

        parallel_for(agents, [&](std::size_t m) {
            auto& f = fwd[m];
            f.trace = encode_batch(agents_[m].encoder, x);
            f.cosines = agents_[m].head.weight * f.trace.embedding;
            f.arc = batch_margin_losses(f.cosines, labels, cfg_.margin, LossKind::Arc);
        });

        IterationLog log;
        log.iteration = it;
        log.noise_percent = cfg_.noise_percent;
        log.mean_loss.assign(agents, 0.0);
        log.mc_sizes.assign(agents, 0);
        log.mc_selected.assign(agents, 0);
        log.skipped.assign(agents, 0);

        std::vector<int> all(b);
        std::iota(all.begin(), all.end(), 0);
        if (truth) log.batch_noisy_fraction = noisy_fraction(data, batch, all);

        if (it < warmup) {
            log.warmup = true;
            log.hc_size = static_cast<std::size_t>(b);
            log.permutation.resize(agents);
            std::iota(log.permutation.begin(), log.permutation.end(), 0);
            log.hc_noisy_fraction = log.batch_noisy_fraction;
            parallel_for(agents, [&](std::size_t m) {
                const auto& f = fwd[m];
                const AgentGrads g = backward(agents_[m], f.trace, f.arc.grad_cos / static_cast<double>(b));
                sgd_step(agents_[m], g, sgd, momentum[m], it);
                log.mean_loss[m] = f.arc.per_sample.mean();
            });
        } else {
            Matrix losses(agents, b);
            for (int m = 0; m < agents; ++m) losses.row(m) = fwd[m].arc.per_sample.transpose();
            const BatchPartition part = partition_batch(losses, cfg_.noise_percent);
            if (hooks.on_partition) hooks.on_partition(part, batch);
            const ExchangePlan plan = make_exchange_plan(cfg_, rng_);

            std::vector<std::vector<int>> selected(agents);
            for (int m = 0; m < agents; ++m) {
                Recommendations received;
                for (int s : plan.senders_of(m)) received.emplace_back(s, part.mc[s]);
                selected[m] = select_received_mc(received, part.mc[m].size(), losses);
            }
            parallel_for(agents, [&](std::size_t m) {
                const auto& f = fwd[m];
                GroupLoss gl = group_loss(agents_[m], f.trace, f.cosines, labels, part.hc, selected[m], cfg_.margin);
                if (gl.empty()) {
                    log.skipped[m] = 1;
                    return;
                }
                if (!std::isfinite(gl.loss)) throw DivergedError("diverged");
                sgd_step(agents_[m], gl.grads, sgd, momentum[m], it);
                log.mean_loss[m] = gl.loss;
            });
            log.hc_size = part.hc.size();
            for (int m = 0; m < agents; ++m) {
                log.mc_sizes[m] = part.mc[m].size();
                log.mc_selected[m] = selected[m].size();
            }
            log.permutation = plan.seat;
            if (truth) log.hc_noisy_fraction = noisy_fraction(data, batch, part.hc);
        }
        if (hooks.on_iteration) hooks.on_iteration(log);
        logs.push_back(std::move(log));
    }
    return logs;
}

std::vector<Agent> make_agents(const EncoderArch& arch, int classes, int count, std::uint64_t seed) {
    std::vector<Agent> out;
    for (int m = 0; m < count; ++m) out.push_back(Agent::make(arch, classes, derive_seed(seed, 100 + m)));
    return out;
}

std::vector<IterationLog> gn_train(std::vector<Agent>& agents, const LabelledSet& data, const GroupConfig& cfg,
                                   long iterations, const TrainHooks& hooks) {
    GroupTrainer trainer(cfg, std::move(agents));
    auto logs = trainer.train(data, iterations, hooks);
    agents = std::move(trainer.agents());
    return logs;
}

std::vector<IterationLog> train_baseline(Agent& agent, const LabelledSet& data, const GroupConfig& cfg,
                                         long iterations) {
    if (data.empty()) throw ValidationError("training set is empty");
    if (agent.head.num_classes() != data.num_classes)
        throw ValidationError("class head size does not match dataset class count");
    cfg.margin.validate();
    cfg.sgd.validate();
    const SgdConfig sgd = resolve_schedule(cfg, iterations);
    std::mt19937_64 rng(derive_seed(cfg.seed, 7001));
    BatchSampler sampler(data.size());
    MomentumState momentum(agent);
    std::vector<IterationLog> logs;
    for (long it = 0; it < iterations; ++it) {
        const std::vector<int> batch = sampler.next(cfg.batch_size, rng);
        const Matrix x = data.gather(batch);
        std::vector<int> labels(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = data.labels[batch[i]];
        const EncoderTrace trace = encode_batch(agent.encoder, x);
        const Matrix cos = agent.head.weight * trace.embedding;
        const BatchLoss arc = batch_margin_losses(cos, labels, cfg.margin, LossKind::Arc);
        const AgentGrads g = backward(agent, trace, arc.grad_cos / static_cast<double>(batch.size()));
        sgd_step(agent, g, sgd, momentum, it);
        IterationLog log;
        log.iteration = it;
        log.mean_loss = {arc.per_sample.mean()};
        log.hc_size = batch.size();
        logs.push_back(std::move(log));
    }
    return logs;
}

}  // namespace cotrain
