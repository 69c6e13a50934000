// SPDX-License-Identifier: Apache-2.0
#include "mala/eval_icl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace mala {

namespace {

constexpr std::string_view kSentSlot = "[sent]";
constexpr std::string_view kLabelSlot = "[label]";

std::size_t count_occurrences(const std::string& s, std::string_view needle) {
    std::size_t n = 0;
    for (std::size_t pos = s.find(needle); pos != std::string::npos;
         pos = s.find(needle, pos + 1))
        ++n;
    return n;
}

std::string replace_once(std::string s, std::string_view slot, const std::string& value) {
    const std::size_t pos = s.find(slot);
    if (pos == std::string::npos) throw std::logic_error("template slot missing");
    return s.replace(pos, slot.size(), value);
}

}  // namespace

void IclTask::validate() const {
    if (labels.empty()) throw std::invalid_argument("task has no labels");
    if (count_occurrences(tmpl, kSentSlot) != 1 || count_occurrences(tmpl, kLabelSlot) != 1)
        throw std::invalid_argument("template must contain [sent] and [label] exactly once");
    for (const auto& [lang, split] : data) {
        for (const auto* set : {&split.train, &split.test}) {
            for (const auto& ex : *set) {
                if (std::find(labels.begin(), labels.end(), ex.label) == labels.end())
                    throw std::invalid_argument("gold label '" + ex.label +
                                                "' not in label set (" + lang.str() + ")");
            }
        }
    }
}

IclTask load_task(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(dir / "task.json", std::ios::binary);
    if (!in) throw std::runtime_error("task manifest missing: " + (dir / "task.json").string());
    nlohmann::json j = nlohmann::json::parse(in);

    IclTask task;
    task.name = j.at("name").get<std::string>();
    task.labels = j.at("labels").get<std::vector<std::string>>();
    task.tmpl = j.at("template").get<std::string>();

    auto read_jsonl = [](const fs::path& p) {
        std::vector<IclExample> out;
        std::ifstream f(p, std::ios::binary);
        if (!f) return out;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json rec = nlohmann::json::parse(line);
            out.push_back({rec.at("text").get<std::string>(), rec.at("label").get<std::string>()});
        }
        return out;
    };

    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        if (!LanguageTag::valid(name)) continue;
        IclSplit split;
        split.train = read_jsonl(entry.path() / "train.jsonl");
        split.test = read_jsonl(entry.path() / "test.jsonl");
        task.data.emplace(LanguageTag::parse(name), std::move(split));
    }
    task.validate();
    return task;
}

PromptSpec render_prompt(const IclTask& task, std::span<const IclExample> shots,
                         const std::string& query) {
    PromptSpec spec;
    spec.shots.assign(shots.begin(), shots.end());
    spec.query = query;

    std::string out;
    for (const auto& shot : shots) {
        std::string line = replace_once(task.tmpl, kSentSlot, shot.text);
        line = replace_once(std::move(line), kLabelSlot, shot.label);
        out += line;
        out += '\n';
    }
    std::string qline = replace_once(task.tmpl, kSentSlot, query);
    qline = qline.substr(0, qline.find(kLabelSlot));
    while (!qline.empty() && qline.back() == ' ') qline.pop_back();
    qline += ' ';
    out += qline;
    spec.rendered = std::move(out);
    return spec;
}

std::vector<double> ModelScorer::score(const std::string& prompt,
                                       const std::vector<std::string>& labels) const {
    const std::vector<std::uint32_t> prompt_ids = encode(*tokenizer_, prompt);
    std::vector<double> out;
    out.reserve(labels.size());
    for (const auto& label : labels) {
        const std::vector<std::uint32_t> label_ids = encode(*tokenizer_, label);
        std::vector<std::uint32_t> full = prompt_ids;
        full.insert(full.end(), label_ids.begin(), label_ids.end());
        if (full.size() > model_->config.context_len)
            throw std::runtime_error("prompt overflows context (" + std::to_string(full.size()) +
                                     " tokens): " + prompt.substr(0, 60) + "...");
        const Matrix logits = forward_logits(*model_, full);
        double total = 0.0;
        for (std::size_t t = prompt_ids.size(); t < full.size(); ++t) {
            const double* lr = logits.row(t - 1);
            const std::size_t V = logits.cols;
            const double maxv = *std::max_element(lr, lr + V);
            double sum = 0.0;
            for (std::size_t i = 0; i < V; ++i) sum += std::exp(lr[i] - maxv);
            total += lr[full[t]] - (maxv + std::log(sum));
        }
        out.push_back(length_normalize_ ? total / static_cast<double>(label_ids.size()) : total);
    }
    return out;
}

std::size_t predict_label(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("no label scores");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

std::vector<IclExample> select_shots_random(std::span<const IclExample> pool, std::size_t k,
                                            std::uint64_t seed) {
    if (k > pool.size()) {
        warn("requested " + std::to_string(k) + " shots from a pool of " +
             std::to_string(pool.size()) + "; clamping");
        k = pool.size();
    }
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<IclExample> shots;
    shots.reserve(k);
    for (std::size_t i = 0; i < k; ++i) shots.push_back(pool[idx[i]]);
    return shots;
}

std::vector<double> Embedder::embed(const std::string& text) const {
    std::vector<std::uint32_t> ids = encode(*tokenizer, text);
    if (ids.empty()) return std::vector<double>(model->config.d_model, 0.0);
    if (ids.size() > model->config.context_len) ids.resize(model->config.context_len);
    const Matrix h = hidden_states(*model, ids, layer_index);
    std::vector<double> mean(h.cols, 0.0);
    for (std::size_t t = 0; t < h.rows; ++t)
        for (std::size_t c = 0; c < h.cols; ++c) mean[c] += h.at(t, c);
    for (double& v : mean) v /= static_cast<double>(h.rows);
    return mean;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        warn("zero-vector embedding; cosine similarity defined as 0");
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<IclExample> select_shots_retrieval(std::span<const IclExample> pool,
                                               const std::string& query, std::size_t k,
                                               const Embedder& embedder) {
    if (k > pool.size()) {
        warn("requested " + std::to_string(k) + " shots from a pool of " +
             std::to_string(pool.size()) + "; clamping");
        k = pool.size();
    }
    const std::vector<double> qv = embedder.embed(query);
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i)
        ranked.emplace_back(cosine_similarity(embedder.embed(pool[i].text), qv), i);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    // Most similar goes last, adjacent to the query in the prompt.
    std::vector<IclExample> shots;
    shots.reserve(k);
    for (std::size_t i = k; i-- > 0;) shots.push_back(pool[ranked[i].second]);
    return shots;
}

EvalReport evaluate_task(const LabelScorer& scorer, const IclTask& task, std::size_t k,
                         const ShotSelector& selector) {
    EvalReport report;
    report.n_shots = k;
    report.selector = selector.name();
    report.seed = selector.seed;

    for (const auto& [lang, split] : task.data) {
        if (split.test.empty()) {
            warn("no test items for " + lang.str() + ", language skipped");
            continue;
        }
        std::size_t correct = 0;
        for (std::size_t qi = 0; qi < split.test.size(); ++qi) {
            const IclExample& item = split.test[qi];
            std::vector<IclExample> shots;
            if (k > 0) {
                if (selector.kind == ShotSelector::Kind::random) {
                    const std::uint64_t item_seed =
                        selector.seed ^ fnv1a64(lang.str()) ^ (0x9e3779b97f4a7c15ull * (qi + 1));
                    shots = select_shots_random(split.train, k, item_seed);
                } else {
                    shots = select_shots_retrieval(split.train, item.text, k, selector.embedder);
                }
            }
            const PromptSpec prompt = render_prompt(task, shots, item.text);
            const std::vector<double> scores = scorer.score(prompt.rendered, task.labels);
            const std::size_t pred = predict_label(scores);
            if (task.labels[pred] == item.label) ++correct;
        }
        report.per_language_accuracy[lang] =
            static_cast<double>(correct) / static_cast<double>(split.test.size());
    }

    double sum = 0.0;
    for (const auto& [lang, acc] : report.per_language_accuracy) sum += acc;
    report.macro_average = report.per_language_accuracy.empty()
                               ? 0.0
                               : sum / static_cast<double>(report.per_language_accuracy.size());
    return report;
}

std::vector<EvalReport> shot_sweep(const LabelScorer& scorer, const IclTask& task,
                                   const std::vector<std::size_t>& shot_counts,
                                   const ShotSelector& selector) {
    std::vector<EvalReport> reports;
    reports.reserve(shot_counts.size());
    for (std::size_t k : shot_counts) reports.push_back(evaluate_task(scorer, task, k, selector));
    return reports;
}

}  // namespace mala
