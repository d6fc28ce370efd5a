// ROC analysis. AUC is the Mann-Whitney rank statistic: the fraction of
// (anomalous, normal) pairs ranked correctly, ties counted 0.5. Anomalous is
// the positive class and every score ranks positives high.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace vaedet {

struct LabeledScores {
    std::vector<std::pair<double, bool>> pairs;  // (score, is_anomaly)

    void add(double score, bool is_anomaly) { pairs.emplace_back(score, is_anomaly); }
};

namespace detail {

inline void validate_scores(const LabeledScores& s) {
    size_t pos = 0, neg = 0;
    for (const auto& [score, anomaly] : s.pairs) {
        if (!std::isfinite(score)) throw std::runtime_error("auc: non-finite score");
        (anomaly ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0)
        throw std::runtime_error("auc: need at least one positive and one negative, got " +
                                 std::to_string(pos) + "/" + std::to_string(neg));
}

}  // namespace detail

// O(n log n) via average ranks: AUC = (sum of positive ranks - P(P+1)/2) / (P*N).
inline double auc_roc(const LabeledScores& s) {
    detail::validate_scores(s);
    const size_t n = s.pairs.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return s.pairs[a].first < s.pairs[b].first; });

    double rank_sum_pos = 0.0;
    size_t n_pos = 0, n_neg = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && s.pairs[order[j]].first == s.pairs[order[i]].first) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (size_t k = i; k < j; ++k)
            if (s.pairs[order[k]].second) rank_sum_pos += avg_rank;
        i = j;
    }
    for (const auto& [score, anomaly] : s.pairs) (anomaly ? n_pos : n_neg) += 1;
    return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct RocPoint {
    double threshold;  // predict anomalous when score >= threshold
    double fpr;
    double tpr;
};

// One point per distinct score (descending) plus the (0,0) start; both rates
// are monotone nondecreasing and the curve ends at (1,1).
inline std::vector<RocPoint> roc_curve(const LabeledScores& s) {
    detail::validate_scores(s);
    auto sorted = s.pairs;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    double n_pos = 0, n_neg = 0;
    for (const auto& [score, anomaly] : sorted) (anomaly ? n_pos : n_neg) += 1;

    std::vector<RocPoint> curve;
    curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    size_t tp = 0, fp = 0, i = 0;
    while (i < sorted.size()) {
        size_t j = i;
        while (j < sorted.size() && sorted[j].first == sorted[i].first) ++j;
        for (size_t k = i; k < j; ++k) (sorted[k].second ? tp : fp) += 1;
        curve.push_back({sorted[i].first, static_cast<double>(fp) / n_neg,
                         static_cast<double>(tp) / n_pos});
        i = j;
    }
    return curve;
}

inline double trapezoid_area(const std::vector<RocPoint>& curve) {
    double area = 0.0;
    for (size_t i = 1; i < curve.size(); ++i)
        area += 0.5 * (curve[i].tpr + curve[i - 1].tpr) * (curve[i].fpr - curve[i - 1].fpr);
    return area;
}

// ---------------------------------------------------------------------------
// per-class evaluation
// ---------------------------------------------------------------------------

// One scored run: image id -> (score name -> value).
struct ScoreTable {
    std::vector<std::string> score_names;
    std::map<std::string, std::map<std::string, double>> rows;  // id -> name -> value
};

struct EvalCell {
    double mean = 0.0;
    std::vector<double> runs;
};

// AUC matrix: score variant x (anomaly class... + "all").
struct EvalReport {
    std::vector<std::string> score_names;
    std::vector<std::string> class_names;  // sorted anomaly classes, then "all"
    std::map<std::string, std::map<std::string, EvalCell>> cells;  // score -> class -> cell
    int run_count = 0;
};

// Labels come from the manifest: negatives are the test_normal split,
// positives the test_anomaly split grouped by label. Every scored image must
// be present in the manifest.
template <typename Manifest>
EvalReport evaluate(const std::vector<ScoreTable>& runs, const Manifest& manifest,
                    const std::string& normal_label) {
    if (runs.empty()) throw std::runtime_error("evaluate: no score tables");

    std::map<std::string, const typename std::decay_t<decltype(manifest.records)>::value_type*>
        by_path;
    for (const auto& r : manifest.records) by_path[r.path] = &r;

    std::set<std::string> classes;
    std::vector<std::string> missing;
    for (const auto& run : runs)
        for (const auto& [id, values] : run.rows) {
            auto it = by_path.find(id);
            if (it == by_path.end()) {
                missing.push_back(id);
                continue;
            }
            if (it->second->split == "test_anomaly" && it->second->label != normal_label)
                classes.insert(it->second->label);
        }
    if (!missing.empty()) {
        std::string msg = "evaluate: scored images missing from manifest:";
        for (const auto& id : missing) msg += " " + id;
        throw std::runtime_error(msg);
    }

    EvalReport report;
    report.score_names = runs.front().score_names;
    report.class_names.assign(classes.begin(), classes.end());
    report.class_names.push_back("all");
    report.run_count = static_cast<int>(runs.size());

    for (const auto& score : report.score_names) {
        for (const auto& cls : report.class_names) {
            EvalCell cell;
            for (const auto& run : runs) {
                LabeledScores ls;
                for (const auto& [id, values] : run.rows) {
                    const auto* rec = by_path.at(id);
                    auto vit = values.find(score);
                    if (vit == values.end()) continue;
                    if (rec->split == "test_normal" && rec->label == normal_label) {
                        ls.add(vit->second, false);
                    } else if (rec->split == "test_anomaly" && rec->label != normal_label &&
                               (cls == "all" || rec->label == cls)) {
                        ls.add(vit->second, true);
                    }
                }
                cell.runs.push_back(auc_roc(ls));
            }
            for (const double v : cell.runs) cell.mean += v;
            cell.mean /= static_cast<double>(cell.runs.size());
            report.cells[score][cls] = std::move(cell);
        }
    }
    return report;
}

}  // namespace vaedet
