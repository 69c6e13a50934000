// SPDX-License-Identifier: Apache-2.0
#include "mala/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mala {

void BinSpec::validate() const {
    if (edges.empty()) throw std::invalid_argument("BinSpec needs at least one edge");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1]))
            throw std::invalid_argument("bin edges must be strictly increasing");
}

std::vector<std::string> BinSpec::labels() const {
    validate();
    std::vector<std::string> out;
    auto fmt = [](double v) {
        std::ostringstream os;
        os << v;
        return os.str();
    };
    out.push_back("(-inf," + fmt(edges.front()) + ")");
    for (std::size_t i = 1; i < edges.size(); ++i)
        out.push_back("[" + fmt(edges[i - 1]) + "," + fmt(edges[i]) + ")");
    out.push_back("[" + fmt(edges.back()) + ",inf)");
    return out;
}

BinCounts bin_scores(std::span<const double> scores, const BinSpec& spec) {
    spec.validate();
    if (scores.empty()) throw std::invalid_argument("no scores to bin");
    BinCounts out;
    out.counts.assign(spec.edges.size() + 1, 0);
    for (double s : scores) {
        if (!std::isfinite(s)) {
            ++out.non_finite;
            continue;
        }
        // bin index = number of edges <= s, so a score on an edge falls right.
        const std::size_t bin =
            std::upper_bound(spec.edges.begin(), spec.edges.end(), s) - spec.edges.begin();
        ++out.counts[bin];
    }
    return out;
}

std::string FamilyMap::family_of(const LanguageTag& lang) const {
    auto it = assignments.find(lang.str());
    return it == assignments.end() ? "other" : it->second;
}

FamilyMap FamilyMap::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read family map: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    FamilyMap map;
    for (const auto& [lang, family] : j.items()) {
        if (!LanguageTag::valid(lang))
            throw std::runtime_error("invalid language tag in family map: " + lang);
        map.assignments[lang] = family.get<std::string>();
    }
    return map;
}

std::vector<FamilyAggregate> aggregate_by_family(
    const std::vector<std::pair<LanguageTag, double>>& records, const FamilyMap& map) {
    std::map<std::string, std::pair<double, std::size_t>> sums;
    for (const auto& [lang, score] : records) {
        auto& [sum, n] = sums[map.family_of(lang)];
        sum += score;
        ++n;
    }
    std::vector<FamilyAggregate> out;
    for (const auto& [family, sn] : sums)
        out.push_back({family, sn.first / static_cast<double>(sn.second), sn.second});
    return out;
}

GainTable gain_table(const std::map<LanguageTag, double>& report_a,
                     const std::map<LanguageTag, double>& report_b, std::size_t top_n) {
    GainTable table;
    for (const auto& [lang, a] : report_a) {
        auto it = report_b.find(lang);
        if (it == report_b.end()) continue;
        table.all.push_back({lang, it->second - a});
    }
    if (table.all.empty()) throw std::runtime_error("reports share no languages");

    auto by_delta_desc = [](const GainRow& x, const GainRow& y) {
        if (x.delta != y.delta) return x.delta > y.delta;
        return x.lang < y.lang;
    };
    auto by_delta_asc = [](const GainRow& x, const GainRow& y) {
        if (x.delta != y.delta) return x.delta < y.delta;
        return x.lang < y.lang;
    };
    std::vector<GainRow> sorted = table.all;
    std::sort(sorted.begin(), sorted.end(), by_delta_desc);
    const std::size_t n = std::min(top_n, sorted.size());
    table.high_end.assign(sorted.begin(), sorted.begin() + n);
    std::sort(sorted.begin(), sorted.end(), by_delta_asc);
    table.low_end.assign(sorted.begin(), sorted.begin() + n);
    return table;
}

CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("series length mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("pearson needs at least 2 samples");

    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);

    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw std::invalid_argument("pearson undefined for a constant series");
    return {sxy / std::sqrt(sxx * syy), n};
}

}  // namespace mala
