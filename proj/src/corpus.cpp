// SPDX-License-Identifier: Apache-2.0
#include "mala/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mala {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::uint64_t CorpusManifest::total_sentences() const {
    std::uint64_t t = 0;
    for (const auto& e : entries) t += e.sentence_count;
    return t;
}

std::string CorpusManifest::digest() const {
    std::ostringstream os;
    for (const auto& e : entries)
        os << e.lang.str() << ':' << e.sentence_count << ':' << e.byte_count << ';';
    return hex64(fnv1a64(os.str()));
}

ordered_json CorpusManifest::to_json() const {
    ordered_json j;
    j["entries"] = ordered_json::array();
    for (const auto& e : entries) {
        j["entries"].push_back({{"lang", e.lang.str()},
                                {"sentence_count", e.sentence_count},
                                {"byte_count", e.byte_count},
                                {"path", e.path.string()}});
    }
    j["digest"] = digest();
    return j;
}

CorpusManifest CorpusManifest::from_json(const nlohmann::json& j) {
    CorpusManifest m;
    for (const auto& e : j.at("entries")) {
        m.entries.push_back({LanguageTag::parse(e.at("lang").get<std::string>()),
                             e.at("sentence_count").get<std::uint64_t>(),
                             e.at("byte_count").get<std::uint64_t>(),
                             fs::path(e.at("path").get<std::string>())});
    }
    return m;
}

std::string to_string(SamplingPurpose p) {
    return p == SamplingPurpose::vocab_build ? "vocab_build" : "training";
}

SamplingPurpose sampling_purpose_from_string(std::string_view s) {
    if (s == "vocab_build") return SamplingPurpose::vocab_build;
    if (s == "training") return SamplingPurpose::training;
    throw std::invalid_argument("unknown sampling purpose: " + std::string(s));
}

ordered_json SamplingPlan::to_json() const {
    ordered_json j;
    j["alpha"] = alpha;
    j["purpose"] = to_string(purpose);
    j["target_total"] = target_total;
    j["probs"] = ordered_json::array();
    for (const auto& [lang, p] : probs) j["probs"].push_back({{"lang", lang.str()}, {"p", p}});
    return j;
}

SamplingPlan SamplingPlan::from_json(const nlohmann::json& j) {
    SamplingPlan plan;
    plan.alpha = j.at("alpha").get<double>();
    plan.purpose = sampling_purpose_from_string(j.at("purpose").get<std::string>());
    plan.target_total = j.at("target_total").get<std::uint64_t>();
    for (const auto& e : j.at("probs"))
        plan.probs.emplace_back(LanguageTag::parse(e.at("lang").get<std::string>()),
                                e.at("p").get<double>());
    return plan;
}

ordered_json SampledCorpus::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    j["source_manifest_hash"] = source_manifest_hash;
    j["allocations"] = ordered_json::array();
    for (const auto& [lang, n] : allocations)
        j["allocations"].push_back({{"lang", lang.str()}, {"sentence_count", n}});
    return j;
}

SampledCorpus SampledCorpus::from_json(const nlohmann::json& j) {
    SampledCorpus s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.source_manifest_hash = j.at("source_manifest_hash").get<std::string>();
    for (const auto& e : j.at("allocations"))
        s.allocations.emplace_back(LanguageTag::parse(e.at("lang").get<std::string>()),
                                   e.at("sentence_count").get<std::uint64_t>());
    return s;
}

CorpusManifest ingest_corpus(const fs::path& root) {
    if (!fs::is_directory(root))
        throw std::runtime_error("corpus root missing: " + root.string());

    CorpusManifest manifest;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const fs::path& p = entry.path();
        if (p.extension() != ".txt" || !LanguageTag::valid(p.stem().string())) {
            warn("skipping non-corpus file: " + p.filename().string());
            continue;
        }
        std::ifstream in(p, std::ios::binary);
        if (!in) {
            warn("unreadable corpus file skipped: " + p.string());
            continue;
        }
        std::uint64_t lines = 0, bytes = 0;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            ++lines;
            bytes += line.size();
        }
        if (lines == 0) {
            warn("empty corpus excluded: " + p.filename().string());
            continue;
        }
        manifest.entries.push_back({LanguageTag::parse(p.stem().string()), lines, bytes, p});
    }
    std::sort(manifest.entries.begin(), manifest.entries.end(),
              [](const auto& a, const auto& b) { return a.lang < b.lang; });
    return manifest;
}

SamplingPlan compute_sampling(const CorpusManifest& manifest, double alpha,
                              SamplingPurpose purpose, std::uint64_t target_total) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("alpha must lie in [0,1]");
    if (manifest.entries.empty())
        throw std::invalid_argument("manifest is empty");

    const double total = static_cast<double>(manifest.total_sentences());
    SamplingPlan plan;
    plan.alpha = alpha;
    plan.purpose = purpose;
    plan.target_total = target_total;

    double norm = 0.0;
    std::vector<double> weights;
    weights.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        const double q = static_cast<double>(e.sentence_count) / total;
        const double w = std::pow(q, alpha);
        weights.push_back(w);
        norm += w;
    }
    for (std::size_t i = 0; i < weights.size(); ++i)
        plan.probs.emplace_back(manifest.entries[i].lang, weights[i] / norm);
    return plan;
}

std::vector<std::uint64_t> largest_remainder(const std::vector<double>& probs,
                                             std::uint64_t total) {
    const std::size_t n = probs.size();
    std::vector<std::uint64_t> alloc(n, 0);
    std::vector<std::pair<double, std::size_t>> remainders;  // (-remainder, index)
    std::uint64_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ideal = static_cast<double>(total) * probs[i];
        alloc[i] = static_cast<std::uint64_t>(std::floor(ideal));
        assigned += alloc[i];
        remainders.emplace_back(-(ideal - std::floor(ideal)), i);
    }
    std::sort(remainders.begin(), remainders.end());
    for (std::size_t j = 0; assigned < total; ++j, ++assigned)
        ++alloc[remainders[j % n].second];
    return alloc;
}

SampledCorpus draw_sample(const SamplingPlan& plan, const CorpusManifest& manifest,
                          std::uint64_t seed, bool multinomial_draw) {
    if (plan.target_total < 1)
        throw std::invalid_argument("target_total must be >= 1");
    if (plan.probs.size() != manifest.entries.size())
        throw std::invalid_argument("plan/manifest language sets differ");

    std::uint64_t available = 0;
    std::vector<std::uint64_t> caps;
    for (const auto& e : manifest.entries) {
        caps.push_back(e.sentence_count);
        available += e.sentence_count;
    }
    if (plan.target_total > available) {
        throw std::runtime_error(
            "target_total " + std::to_string(plan.target_total) + " exceeds available " +
            std::to_string(available) + " sentences (shortfall " +
            std::to_string(plan.target_total - available) + ")");
    }

    const std::size_t n = plan.probs.size();
    std::vector<double> probs(n);
    for (std::size_t i = 0; i < n; ++i) probs[i] = plan.probs[i].second;

    std::vector<std::uint64_t> alloc(n, 0);
    if (multinomial_draw) {
        Rng rng(seed);
        std::vector<double> weights = probs;
        for (std::uint64_t k = 0; k < plan.target_total; ++k) {
            double total_w = std::accumulate(weights.begin(), weights.end(), 0.0);
            double r = rng.uniform() * total_w;
            std::size_t pick = 0;
            for (; pick + 1 < n; ++pick) {
                if (r < weights[pick]) break;
                r -= weights[pick];
            }
            ++alloc[pick];
            if (alloc[pick] == caps[pick]) weights[pick] = 0.0;  // exhausted
        }
    } else {
        alloc = largest_remainder(probs, plan.target_total);
        // Clamp overfull languages and re-apportion the surplus among the rest.
        while (true) {
            std::uint64_t surplus = 0;
            std::vector<std::size_t> open;
            for (std::size_t i = 0; i < n; ++i) {
                if (alloc[i] > caps[i]) {
                    surplus += alloc[i] - caps[i];
                    alloc[i] = caps[i];
                } else if (alloc[i] < caps[i]) {
                    open.push_back(i);
                }
            }
            if (surplus == 0) break;
            double open_mass = 0.0;
            for (std::size_t i : open) open_mass += probs[i];
            std::vector<double> open_probs;
            for (std::size_t i : open) open_probs.push_back(probs[i] / open_mass);
            auto extra = largest_remainder(open_probs, surplus);
            for (std::size_t j = 0; j < open.size(); ++j) alloc[open[j]] += extra[j];
        }
    }

    SampledCorpus out;
    out.seed = seed;
    out.source_manifest_hash = manifest.digest();
    for (std::size_t i = 0; i < n; ++i)
        out.allocations.emplace_back(plan.probs[i].first, alloc[i]);
    return out;
}

std::vector<std::string> materialize_sample(const SampledCorpus& sample,
                                            const CorpusManifest& manifest) {
    std::vector<std::string> sentences;
    for (const auto& [lang, want] : sample.allocations) {
        if (want == 0) continue;
        const ManifestEntry* entry = nullptr;
        for (const auto& e : manifest.entries)
            if (e.lang == lang) { entry = &e; break; }
        if (!entry) throw std::runtime_error("language missing from manifest: " + lang.str());

        std::ifstream in(entry->path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open " + entry->path.string());
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) lines.push_back(line);

        std::vector<std::size_t> idx(lines.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 rng(sample.seed ^ fnv1a64(lang.str()));
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t take = std::min<std::size_t>(want, lines.size());
        for (std::size_t i = 0; i < take; ++i) sentences.push_back(lines[idx[i]]);
    }
    return sentences;
}

}  // namespace mala
