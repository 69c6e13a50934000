// SPDX-License-Identifier: Apache-2.0
//
// Reporting helpers: score binning, family aggregation, gain tables, and
// Pearson correlation.
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mala/common.hpp"

namespace mala {

struct BinSpec {
    std::vector<double> edges;  // strictly increasing

    void validate() const;
    /// Human-readable labels: (-inf,e1), [e1,e2), ..., [ek,inf)
    std::vector<std::string> labels() const;
};

struct BinCounts {
    std::vector<std::size_t> counts;  // edges.size() + 1 bins
    std::size_t non_finite = 0;
};

/// Half-open bins; a score equal to an edge falls into the right bin.
BinCounts bin_scores(std::span<const double> scores, const BinSpec& spec);

struct FamilyMap {
    std::map<std::string, std::string> assignments;  // lang tag -> family code

    std::string family_of(const LanguageTag& lang) const;  // "other" when unmapped
    static FamilyMap load(const std::filesystem::path& path);
};

struct FamilyAggregate {
    std::string family;
    double mean = 0.0;
    std::size_t member_count = 0;
};

std::vector<FamilyAggregate> aggregate_by_family(
    const std::vector<std::pair<LanguageTag, double>>& records, const FamilyMap& map);

struct GainRow {
    LanguageTag lang;
    double delta = 0.0;  // scoreB - scoreA
};

struct GainTable {
    std::vector<GainRow> high_end;  // largest deltas, descending
    std::vector<GainRow> low_end;   // smallest deltas, ascending
    std::vector<GainRow> all;       // sorted by language tag
};

/// Deltas over the shared language set; ties in ranking break by tag order.
GainTable gain_table(const std::map<LanguageTag, double>& report_a,
                     const std::map<LanguageTag, double>& report_b, std::size_t top_n);

struct CorrelationResult {
    double r = 0.0;
    std::size_t n = 0;
};

/// Sample Pearson correlation; throws when either series is constant.
CorrelationResult pearson(std::span<const double> x, std::span<const double> y);

}  // namespace mala
