#include "dafdft/metrics.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <vector>

namespace dafdft {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.empty()) throw MetricError("metrics need at least one sample");
    if (scores.size() != labels.size())
        throw MetricError("scores and labels differ in length (" + std::to_string(scores.size()) + " vs " +
                          std::to_string(labels.size()) + ")");
    for (int y : labels)
        if (y != 0 && y != 1) throw MetricError("labels must be 0 or 1, got " + std::to_string(y));
}

std::string percent(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

std::string signed_points(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.2f", v);
    return buf;
}

}  // namespace

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold)
{
    check_inputs(scores, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) correct += ((scores[i] >= threshold ? 1 : 0) == labels[i]);
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double auroc(std::span<const double> scores, std::span<const int> labels)
{
    check_inputs(scores, labels);
    const std::size_t n = scores.size();
    const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const double negatives = static_cast<double>(n) - positives;
    if (positives == 0 || negatives == 0) throw MetricError("AUROC is undefined when only one class is present");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of 1-based average ranks over the positives.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double average_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum += average_rank;
        i = j + 1;
    }
    const double u = rank_sum - positives * (positives + 1.0) / 2.0;
    return u / (positives * negatives);
}

EvalResult evaluate(std::span<const double> scores, std::span<const int> labels, double threshold)
{
    check_inputs(scores, labels);
    EvalResult r;
    r.threshold = threshold;
    r.n_samples = static_cast<std::int64_t>(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted_fake = scores[i] >= threshold;
        if (labels[i] == 1)
            (predicted_fake ? r.confusion.tp : r.confusion.fn)++;
        else
            (predicted_fake ? r.confusion.fp : r.confusion.tn)++;
    }
    r.accuracy = static_cast<double>(r.confusion.tp + r.confusion.tn) / static_cast<double>(r.n_samples);
    const bool both = r.confusion.tp + r.confusion.fn > 0 && r.confusion.tn + r.confusion.fp > 0;
    if (both) r.auroc = auroc(scores, labels);
    return r;
}

AblationReport ablation_compare(const EvalResult& a, const EvalResult& b, const std::string& label_a,
                                const std::string& label_b, const std::string& backbone)
{
    if (a.n_samples != b.n_samples)
        throw MetricError("ablation arms were evaluated on different test sets (" + std::to_string(a.n_samples) +
                          " vs " + std::to_string(b.n_samples) + " samples)");
    AblationReport r;
    r.label_a = label_a;
    r.label_b = label_b;
    r.backbone = backbone;
    r.a = a;
    r.b = b;
    r.delta_accuracy_points = 100.0 * (a.accuracy - b.accuracy);
    if (a.auroc && b.auroc) r.delta_auroc_points = 100.0 * (*a.auroc - *b.auroc);
    return r;
}

std::string AblationReport::to_text() const
{
    const auto auroc_text = [](const EvalResult& e) { return e.auroc ? percent(*e.auroc) : std::string("undefined"); };
    std::vector<std::array<std::string, 4>> rows{
        {"Model", "Backbone", "ACC (%)", "AUROC (%)"},
        {label_b, backbone, percent(b.accuracy), auroc_text(b)},
        {label_a, backbone, percent(a.accuracy), auroc_text(a)},
        {"Delta", "", signed_points(delta_accuracy_points),
         delta_auroc_points ? signed_points(*delta_auroc_points) : std::string("undefined")},
    };
    std::array<std::size_t, 4> width{};
    for (const auto& row : rows)
        for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], row[c].size());

    std::ostringstream out;
    const auto rule = [&] {
        std::size_t total = 0;
        for (auto w : width) total += w + 3;
        out << std::string(total, '-') << '\n';
    };
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (r == 0 || r == 1 || r == 3) rule();
        for (std::size_t c = 0; c < 4; ++c) {
            const auto& cell = rows[r][c];
            if (c < 2)
                out << cell << std::string(width[c] - cell.size(), ' ');
            else
                out << std::string(width[c] - cell.size(), ' ') << cell;
            out << (c + 1 < 4 ? " | " : "\n");
        }
    }
    rule();
    out << "Both arms evaluated on the same " << a.n_samples << " test samples.\n"
        << "Synthetic desk-scale run: no claim is made about the sign or size of the delta.\n";
    return out.str();
}

std::string AblationReport::to_csv() const
{
    std::ostringstream out;
    out.precision(17);
    out << "model,backbone,n_samples,accuracy,auroc\n";
    const auto row = [&](const std::string& label, const EvalResult& e) {
        out << label << ',' << backbone << ',' << e.n_samples << ',' << e.accuracy << ',';
        if (e.auroc) out << *e.auroc;
        out << '\n';
    };
    row(label_b, b);
    row(label_a, a);
    out << "delta_points,," << a.n_samples << ',' << delta_accuracy_points << ',';
    if (delta_auroc_points) out << *delta_auroc_points;
    out << '\n';
    return out.str();
}

}  // namespace dafdft
