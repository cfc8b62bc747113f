#include "cotrain/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>

#include <json.hpp>

#include "cotrain/errors.hpp"

namespace cotrain {

Matrix LabelledSet::gather(std::span<const int> indices) const {
    Matrix out(features.rows(), static_cast<Eigen::Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = features.col(indices[j]);
    return out;
}

LabelledSet LabelledSet::subset(std::span<const int> indices) const {
    LabelledSet out;
    out.features = gather(indices);
    out.num_classes = num_classes;
    for (int i : indices) {
        out.ids.push_back(ids[i]);
        out.labels.push_back(labels[i]);
        out.gt_labels.push_back(gt_labels[i]);
        out.provenance.push_back(provenance[i]);
    }
    return out;
}

std::vector<int> LabelledSet::indices_with_provenance(int tag) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < provenance.size(); ++i)
        if (provenance[i] == tag) out.push_back(static_cast<int>(i));
    return out;
}

void LabelledSet::validate() const {
    const std::size_t n = ids.size();
    if (labels.size() != n || gt_labels.size() != n || provenance.size() != n ||
        static_cast<std::size_t>(features.cols()) != n)
        throw ValidationError("labelled set columns have inconsistent lengths");
    std::unordered_set<long> seen;
    for (std::size_t i = 0; i < n; ++i) {
        if (!seen.insert(ids[i]).second) throw ValidationError("duplicate id " + std::to_string(ids[i]));
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ValidationError("label " + std::to_string(labels[i]) + " outside class count " +
                                  std::to_string(num_classes));
    }
}

UnlabelledPart::UnlabelledPart(Matrix features, std::vector<long> ids, std::vector<int> hidden_labels)
    : features_(std::move(features)), ids_(std::move(ids)), hidden_(std::move(hidden_labels)) {
    if (static_cast<std::size_t>(features_.cols()) != ids_.size() || hidden_.size() != ids_.size())
        throw ValidationError("unlabelled part columns have inconsistent lengths");
}

namespace {

LabelledSet sample_around(const Matrix& prototypes, int per_class, double spread, long first_id,
                          std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    const int classes = static_cast<int>(prototypes.cols());
    LabelledSet set;
    set.num_classes = classes;
    set.features.resize(prototypes.rows(), static_cast<Eigen::Index>(classes) * per_class);
    long id = first_id;
    Eigen::Index col = 0;
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < per_class; ++k, ++col) {
            for (Eigen::Index r = 0; r < prototypes.rows(); ++r)
                set.features(r, col) = prototypes(r, c) + spread * noise(rng);
            set.ids.push_back(id++);
            set.labels.push_back(c);
            set.gt_labels.push_back(c);
            set.provenance.push_back(kSeedProvenance);
        }
    }
    return set;
}

}  // namespace

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
    if (spec.dim < 2) throw ValidationError("synthetic dimension must be >= 2");
    if (spec.classes < 2 || spec.per_class < 2) throw ValidationError("need >= 2 classes of >= 2 samples");
    if (spec.spread < 0.0) throw ValidationError("spread must be non-negative");
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    SyntheticData data;
    data.prototypes.resize(spec.dim, spec.classes);
    for (int c = 0; c < spec.classes; ++c) {
        for (int r = 0; r < spec.dim; ++r) data.prototypes(r, c) = normal(rng);
        data.prototypes.col(c).normalize();
    }
    data.train = sample_around(data.prototypes, spec.per_class, spec.spread, 0, rng);
    data.test = sample_around(data.prototypes, spec.test_per_class, spec.spread,
                              static_cast<long>(data.train.size()), rng);
    return data;
}

LabelledSet gen_synthetic(int classes, int per_class, int dim, double spread, std::uint64_t seed) {
    return gen_synthetic(SyntheticSpec{classes, per_class, 0, dim, spread, seed}).train;
}

LabelledSet gen_from_prototypes(const Matrix& prototypes, int per_class, double spread, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_around(prototypes, per_class, spread, 0, rng);
}

LabelledSet inject_noise(const LabelledSet& set, double rate, NoiseMode mode, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("noise rate must lie in [0, 1)");
    LabelledSet out = set;
    if (rate == 0.0 || set.num_classes < 2) return out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> other(0, set.num_classes - 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out.gt_labels[i] == kNoLabel) out.gt_labels[i] = out.labels[i];
        if (coin(rng) >= rate) continue;
        const int y = out.labels[i];
        if (mode == NoiseMode::PairFlip) {
            out.labels[i] = (y + 1) % set.num_classes;
        } else {
            const int k = other(rng);
            out.labels[i] = k >= y ? k + 1 : k;
        }
    }
    return out;
}

namespace {

std::map<int, std::vector<int>> members_by_label(const LabelledSet& set) {
    std::map<int, std::vector<int>> by;
    for (std::size_t i = 0; i < set.size(); ++i) by[set.labels[i]].push_back(static_cast<int>(i));
    return by;
}

SplitResult assemble(const LabelledSet& set, const std::vector<std::vector<int>>& part_members,
                     int labelled_classes) {
    SplitResult out;
    out.labelled = set.subset(part_members[0]);
    out.labelled.num_classes = labelled_classes;
    std::fill(out.labelled.provenance.begin(), out.labelled.provenance.end(), kSeedProvenance);
    out.manifest.push_back(out.labelled.ids);
    for (std::size_t p = 1; p < part_members.size(); ++p) {
        const auto& idx = part_members[p];
        std::vector<long> ids;
        std::vector<int> hidden;
        for (int i : idx) {
            ids.push_back(set.ids[i]);
            hidden.push_back(set.true_label(i));
        }
        out.manifest.push_back(ids);
        out.unlabelled.emplace_back(set.gather(idx), std::move(ids), std::move(hidden));
    }
    return out;
}

void round_robin(std::vector<int> members, int first_part, int part_count, std::mt19937_64& rng,
                 std::vector<std::vector<int>>& parts) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k)
        parts[first_part + static_cast<int>(k % part_count)].push_back(members[k]);
}

void sort_parts(std::vector<std::vector<int>>& parts) {
    for (auto& p : parts) std::sort(p.begin(), p.end());
}

}  // namespace

SplitResult split_parts(const LabelledSet& set, int parts, std::uint64_t seed) {
    if (parts < 1) throw ValidationError("part count must be >= 1");
    const auto by = members_by_label(set);
    std::string small;
    for (const auto& [label, members] : by)
        if (static_cast<int>(members.size()) < parts) small += " " + std::to_string(label);
    if (!small.empty()) throw ValidationError("classes with fewer members than parts:" + small);

    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> part_members(parts);
    for (const auto& [label, members] : by) round_robin(members, 0, parts, rng, part_members);
    sort_parts(part_members);
    return assemble(set, part_members, set.num_classes);
}

SplitResult split_parts_open_set(const LabelledSet& set, int parts, std::uint64_t seed) {
    if (parts < 2) throw ValidationError("open-set split needs >= 2 parts");
    const int seen = set.num_classes / 2;
    if (seen < 1) throw ValidationError("open-set split needs >= 2 classes");
    const auto by = members_by_label(set);
    std::string small;
    for (const auto& [label, members] : by) {
        const int need = label < seen ? parts : parts - 1;
        if (static_cast<int>(members.size()) < need) small += " " + std::to_string(label);
    }
    if (!small.empty()) throw ValidationError("classes too small for open-set split:" + small);

    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> part_members(parts);
    for (const auto& [label, members] : by) {
        if (label < seen)
            round_robin(members, 0, parts, rng, part_members);
        else
            round_robin(members, 1, parts - 1, rng, part_members);
    }
    sort_parts(part_members);
    return assemble(set, part_members, seen);
}

// ---------------------------------------------------------------------------
// CSV: id,label,gt_label,f0,...,f{d-1}

namespace {

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view text, std::size_t line, const char* what) {
    T value{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
        throw ParseError(line, std::string("non-numeric ") + what + " '" + std::string(text) + "'");
    return value;
}

}  // namespace

void write_csv(std::ostream& out, const LabelledSet& set) {
    out << "id,label,gt_label";
    for (int k = 0; k < set.dim(); ++k) out << ",f" << k;
    out << '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        out << set.ids[i] << ',' << set.labels[i] << ',';
        if (set.gt_labels[i] != kNoLabel) out << set.gt_labels[i];
        for (int k = 0; k < set.dim(); ++k) out << ',' << format_double(set.features(k, static_cast<Eigen::Index>(i)));
        out << '\n';
    }
}

void write_csv(const std::filesystem::path& path, const LabelledSet& set) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_csv(out, set);
}

LabelledSet parse_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_commas(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "label" || header[2] != "gt_label")
        throw ParseError(1, "header must start with id,label,gt_label");
    const int dim = static_cast<int>(header.size()) - 3;
    for (int k = 0; k < dim; ++k)
        if (header[3 + k] != "f" + std::to_string(k))
            throw ParseError(1, "expected feature column f" + std::to_string(k));

    LabelledSet set;
    std::vector<double> values;
    std::unordered_set<long> seen_ids;
    int max_label = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_commas(line);
        if (fields.size() != header.size())
            throw ParseError(line_no, "ragged row: " + std::to_string(fields.size()) + " fields, expected " +
                                          std::to_string(header.size()));
        const long id = parse_number<long>(fields[0], line_no, "id");
        if (!seen_ids.insert(id).second) throw ParseError(line_no, "duplicate id " + std::to_string(id));
        const int label = parse_number<int>(fields[1], line_no, "label");
        const int gt = fields[2].empty() ? kNoLabel : parse_number<int>(fields[2], line_no, "gt_label");
        if (label < 0 || (gt != kNoLabel && gt < 0)) throw ParseError(line_no, "negative label");
        for (int k = 0; k < dim; ++k) values.push_back(parse_number<double>(fields[3 + k], line_no, "feature"));
        set.ids.push_back(id);
        set.labels.push_back(label);
        set.gt_labels.push_back(gt);
        set.provenance.push_back(kSeedProvenance);
        max_label = std::max({max_label, label, gt});
    }
    set.features = Eigen::Map<Matrix>(values.data(), dim, static_cast<Eigen::Index>(set.ids.size()));
    set.num_classes = max_label + 1;
    return set;
}

LabelledSet load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return parse_csv(in);
}

void write_manifest(const std::filesystem::path& path, const SplitResult& split) {
    nlohmann::json j;
    j["parts"] = split.manifest;
    j["labelled_classes"] = split.labelled.num_classes;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace cotrain
