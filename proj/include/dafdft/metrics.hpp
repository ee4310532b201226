#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

namespace dafdft {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Confusion {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    std::optional<double> auroc;  // empty when the labels hold a single class
    std::int64_t n_samples = 0;
    double threshold = 0.5;
    Confusion confusion;
};

/// Fraction of samples where (score >= threshold) equals the label.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

/// Mann-Whitney AUROC from average ranks (ties get half credit), O(n log n).
/// Throws MetricError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

EvalResult evaluate(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct AblationReport {
    std::string label_a, label_b;  // a = with the module under test, b = without
    std::string backbone;
    EvalResult a, b;
    double delta_accuracy_points = 0.0;  // 100 * (a - b)
    std::optional<double> delta_auroc_points;

    /// Aligned table: one row per arm plus the delta row and a footer note.
    std::string to_text() const;
    std::string to_csv() const;
};

AblationReport ablation_compare(const EvalResult& a, const EvalResult& b, const std::string& label_a,
                                const std::string& label_b, const std::string& backbone = "");

}  // namespace dafdft
