#pragma once

#include <string>
#include <vector>

#include "scalearn/common.hpp"

namespace scalearn {

enum class Metric { Accuracy, F1Macro, Matthews, Pearson };

const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Macro-averaged F1 over C classes; a class absent from both predictions and
// labels contributes 0.
double f1_macro(const std::vector<int>& preds, const std::vector<int>& labels, size_t n_classes);

// Matthews correlation in its multiclass (R_k) form; a zero denominator is
// defined as 0.
double matthews(const std::vector<int>& preds, const std::vector<int>& labels);

// Pearson correlation; zero variance on either side is defined as 0 and
// flagged through `degenerate` when provided.
double pearson(const std::vector<double>& preds, const std::vector<double>& labels,
               bool* degenerate = nullptr);

}  // namespace scalearn
