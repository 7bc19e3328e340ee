#include "scalearn/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace scalearn {

const char* metric_name(Metric m) {
    switch (m) {
        case Metric::Accuracy: return "accuracy";
        case Metric::F1Macro: return "f1_macro";
        case Metric::Matthews: return "matthews";
        case Metric::Pearson: return "pearson";
    }
    throw ContractError("unknown metric");
}

Metric metric_from_name(const std::string& name) {
    if (name == "accuracy") return Metric::Accuracy;
    if (name == "f1_macro") return Metric::F1Macro;
    if (name == "matthews") return Metric::Matthews;
    if (name == "pearson") return Metric::Pearson;
    throw ContractError("unknown metric name: " + name);
}

namespace {

void check_lengths(size_t a, size_t b, size_t min_len, const char* what) {
    if (a != b) throw ContractError(std::string(what) + ": prediction/label length mismatch");
    if (a < min_len)
        throw ContractError(std::string(what) + ": needs at least " + std::to_string(min_len) +
                            " items");
}

}  // namespace

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    check_lengths(preds.size(), labels.size(), 1, "accuracy");
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++correct;
    return double(correct) / double(preds.size());
}

double f1_macro(const std::vector<int>& preds, const std::vector<int>& labels, size_t n_classes) {
    check_lengths(preds.size(), labels.size(), 1, "f1_macro");
    if (n_classes == 0) throw ContractError("f1_macro: n_classes must be positive");
    double total = 0;
    for (size_t c = 0; c < n_classes; ++c) {
        size_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            const bool p = size_t(preds[i]) == c;
            const bool t = size_t(labels[i]) == c;
            if (p && t) ++tp;
            else if (p && !t) ++fp;
            else if (!p && t) ++fn;
        }
        if (tp + fp + fn == 0) continue;  // empty class counts as F1 = 0
        const double denom = double(2 * tp + fp + fn);
        total += denom == 0 ? 0.0 : 2.0 * double(tp) / denom;
    }
    return total / double(n_classes);
}

double matthews(const std::vector<int>& preds, const std::vector<int>& labels) {
    check_lengths(preds.size(), labels.size(), 1, "matthews");
    int max_class = 0;
    for (int p : preds) max_class = std::max(max_class, p);
    for (int l : labels) max_class = std::max(max_class, l);
    const size_t k = size_t(max_class) + 1;

    // R_k correlation: (c*s - sum p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))
    std::vector<double> pred_count(k, 0), true_count(k, 0);
    double correct = 0;
    const double s = double(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
        pred_count[size_t(preds[i])] += 1;
        true_count[size_t(labels[i])] += 1;
        if (preds[i] == labels[i]) correct += 1;
    }
    double pt = 0, pp = 0, tt = 0;
    for (size_t c = 0; c < k; ++c) {
        pt += pred_count[c] * true_count[c];
        pp += pred_count[c] * pred_count[c];
        tt += true_count[c] * true_count[c];
    }
    const double num = correct * s - pt;
    const double denom = std::sqrt((s * s - pp) * (s * s - tt));
    return denom == 0 ? 0.0 : num / denom;
}

double pearson(const std::vector<double>& preds, const std::vector<double>& labels,
               bool* degenerate) {
    check_lengths(preds.size(), labels.size(), 2, "pearson");
    if (degenerate) *degenerate = false;
    const double n = double(preds.size());
    double mp = 0, ml = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        mp += preds[i];
        ml += labels[i];
    }
    mp /= n;
    ml /= n;
    double cov = 0, vp = 0, vl = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double dp = preds[i] - mp, dl = labels[i] - ml;
        cov += dp * dl;
        vp += dp * dp;
        vl += dl * dl;
    }
    if (vp == 0 || vl == 0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return cov / std::sqrt(vp * vl);
}

}  // namespace scalearn
