// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mala/eval_icl.hpp"

using namespace mala;

namespace {

IclTask news_task() {
    IclTask task;
    task.name = "toy-news";
    task.labels = {"sports", "health", "travel"};
    task.tmpl = "The topic of the news [sent] is [label]";
    return task;
}

/// Scores the gold label highest; gold is encoded in the last char of the
/// query line inside the prompt (test helper convention: query text ends in
/// the label's first letter).
class OracleScorer : public LabelScorer {
public:
    explicit OracleScorer(std::string gold) : gold_(std::move(gold)) {}
    std::vector<double> score(const std::string&,
                              const std::vector<std::string>& labels) const override {
        std::vector<double> out(labels.size(), -10.0);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == gold_) out[i] = 0.0;
        return out;
    }

private:
    std::string gold_;
};

class UniformScorer : public LabelScorer {
public:
    std::vector<double> score(const std::string&,
                              const std::vector<std::string>& labels) const override {
        return std::vector<double>(labels.size(), -1.0);
    }
};

}  // namespace

TEST_CASE("golden prompt rendering (byte-exact)") {
    auto task = news_task();
    std::vector<IclExample> shots = {{"X", "sports"}};
    auto spec = render_prompt(task, shots, "Y");
    CHECK(spec.rendered == "The topic of the news X is sports\nThe topic of the news Y is ");

    auto zero = render_prompt(task, {}, "Y");
    CHECK(zero.rendered == "The topic of the news Y is ");

    // newlines inside a shot sentence pass through verbatim
    std::vector<IclExample> nl_shots = {{"line1\nline2", "health"}};
    auto with_nl = render_prompt(task, nl_shots, "Q");
    CHECK(with_nl.rendered ==
          "The topic of the news line1\nline2 is health\nThe topic of the news Q is ");
}

TEST_CASE("prompt length grows exactly linearly in repeated shots") {
    auto task = news_task();
    IclExample shot{"same sentence", "travel"};
    std::size_t prev = render_prompt(task, {}, "q").rendered.size();
    std::size_t delta = 0;
    for (std::size_t k = 1; k <= 5; ++k) {
        std::vector<IclExample> shots(k, shot);
        const std::size_t len = render_prompt(task, shots, "q").rendered.size();
        if (k == 1) delta = len - prev;
        else CHECK(len - prev == delta);
        prev = len;
    }
}

TEST_CASE("malformed templates are rejected at load") {
    auto task = news_task();
    task.tmpl = "no placeholders here";
    CHECK_THROWS(task.validate());
    task.tmpl = "[sent] [sent] is [label]";
    CHECK_THROWS(task.validate());
    task.tmpl = "[sent] is [label] or [label]";
    CHECK_THROWS(task.validate());
}

TEST_CASE("prediction: argmax with earliest-label tie rule") {
    std::vector<double> s1 = {-1.0, -0.5, -2.0};
    CHECK(predict_label(s1) == 1);
    std::vector<double> tie = {-1.0, -1.0, -1.0};
    CHECK(predict_label(tie) == 0);
    // invariance under constant shifts
    std::vector<double> shifted = s1;
    for (double& v : shifted) v += 123.0;
    CHECK(predict_label(shifted) == predict_label(s1));
}

TEST_CASE("model scorer: identical label token sequences score identically") {
    ModelConfig cfg;
    cfg.vocab_size = 300;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.context_len = 32;
    cfg.seed = 2;
    auto model = build_model(cfg);
    auto tok = byte_tokenizer();
    ModelScorer scorer(model, tok);
    auto scores = scorer.score("some prompt ", {"abc", "abc", "xyz"});
    CHECK(scores[0] == scores[1]);
    std::vector<double> two = {scores[0], scores[1]};
    CHECK(predict_label(two) == 0);
}

TEST_CASE("model scorer rejects context overflow by naming the prompt") {
    ModelConfig cfg;
    cfg.vocab_size = 300;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.context_len = 8;
    cfg.seed = 2;
    auto model = build_model(cfg);
    auto tok = byte_tokenizer();
    ModelScorer scorer(model, tok);
    CHECK_THROWS_WITH_AS(scorer.score("this prompt is far too long for ctx 8", {"x"}),
                         doctest::Contains("overflows"), std::runtime_error);
}

TEST_CASE("random shot selection: determinism, permutation at k=|pool|, k=0") {
    std::vector<IclExample> pool = {{"a", "sports"}, {"b", "health"}, {"c", "travel"}};
    auto s1 = select_shots_random(pool, 2, 42);
    auto s2 = select_shots_random(pool, 2, 42);
    REQUIRE(s1.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(s1[i].text == s2[i].text);

    auto all = select_shots_random(pool, 3, 7);
    std::set<std::string> texts;
    for (auto& e : all) texts.insert(e.text);
    CHECK(texts == std::set<std::string>{"a", "b", "c"});

    CHECK(select_shots_random(pool, 0, 1).empty());
    CHECK(select_shots_random(pool, 9, 1).size() == 3);  // clamped with warning
}

TEST_CASE("cosine similarity basics") {
    std::vector<double> x = {1.0, 0.0};
    std::vector<double> y = {0.0, 1.0};
    CHECK(cosine_similarity(x, x) == doctest::Approx(1.0));
    CHECK(cosine_similarity(x, y) == doctest::Approx(0.0));
    std::vector<double> z = {0.0, 0.0};
    CHECK(cosine_similarity(x, z) == 0.0);  // defined as 0 with warning
}

TEST_CASE("retrieval: verbatim pool match ranks first; top-k equals brute force") {
    ModelConfig cfg;
    cfg.vocab_size = 300;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.context_len = 32;
    cfg.seed = 6;
    auto model = build_model(cfg);
    auto tok = byte_tokenizer();
    Embedder emb{&model, &tok, 1};

    std::vector<IclExample> pool = {{"alpha beta", "sports"}, {"gamma delta", "health"},
                                    {"the query text", "travel"}, {"epsilon", "sports"},
                                    {"zeta eta theta", "health"}};
    const std::string query = "the query text";
    auto shots = select_shots_retrieval(pool, query, 2, emb);
    REQUIRE(shots.size() == 2);
    CHECK(shots.back().text == query);  // most similar is adjacent to the query

    // brute-force ranking agrees for every k
    auto qv = emb.embed(query);
    std::vector<std::pair<double, std::size_t>> brute;
    for (std::size_t i = 0; i < pool.size(); ++i)
        brute.emplace_back(cosine_similarity(emb.embed(pool[i].text), qv), i);
    std::stable_sort(brute.begin(), brute.end(), [](auto& a, auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t k = 1; k <= pool.size(); ++k) {
        auto sel = select_shots_retrieval(pool, query, k, emb);
        REQUIRE(sel.size() == k);
        for (std::size_t i = 0; i < k; ++i)
            CHECK(sel[k - 1 - i].text == pool[brute[i].second].text);
    }
}

TEST_CASE("oracle scorer yields accuracy 1.0 for any shot count") {
    auto task = news_task();
    IclSplit split;
    split.train = {{"t1", "sports"}, {"t2", "health"}, {"t3", "travel"}, {"t4", "sports"}};
    split.test = {{"q1", "sports"}, {"q2", "health"}, {"q3", "travel"}};
    task.data[LanguageTag::parse("aaa_Latn")] = split;
    task.data[LanguageTag::parse("bbb_Latn")] = split;

    for (std::size_t k : {0, 1, 3}) {
        double macro_sum = 0.0;
        // oracle needs the per-item gold; emulate by scoring each language
        // item-by-item through evaluate_task's machinery using a scorer that
        // peeks at the gold via the query text
        struct PerItemOracle : LabelScorer {
            const IclTask* task;
            std::vector<double> score(const std::string& prompt,
                                      const std::vector<std::string>& labels) const override {
                // find the gold by locating the query sentence in the test sets
                for (const auto& [lang, split] : task->data)
                    for (const auto& ex : split.test)
                        if (prompt.find("news " + ex.text + " is") != std::string::npos) {
                            std::vector<double> out(labels.size(), -5.0);
                            for (std::size_t i = 0; i < labels.size(); ++i)
                                if (labels[i] == ex.label) out[i] = 0.0;
                            return out;
                        }
                return std::vector<double>(labels.size(), 0.0);
            }
        } oracle;
        oracle.task = &task;
        ShotSelector sel;
        sel.seed = 11;
        auto report = evaluate_task(oracle, task, k, sel);
        CHECK(report.macro_average == doctest::Approx(1.0));
        for (auto& [lang, acc] : report.per_language_accuracy) macro_sum += acc;
        CHECK(report.macro_average ==
              doctest::Approx(macro_sum / report.per_language_accuracy.size()));
    }
}

TEST_CASE("uniform scorer with shuffled label order stays near 1/|labels|") {
    // With constant scores the tie rule always picks index 0, so randomize the
    // label order per trial and count how often the gold lands at index 0.
    const std::size_t n_labels = 7;
    const int trials = 1000;
    std::mt19937_64 rng(123);
    int hits = 0;
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < n_labels; ++i) labels.push_back("label" + std::to_string(i));
    UniformScorer scorer;
    for (int t = 0; t < trials; ++t) {
        std::vector<std::string> order = labels;
        std::shuffle(order.begin(), order.end(), rng);
        const std::string gold = labels[rng() % n_labels];
        auto scores = scorer.score("prompt", order);
        if (order[predict_label(scores)] == gold) ++hits;
    }
    const double p = 1.0 / static_cast<double>(n_labels);
    const double sigma = std::sqrt(p * (1.0 - p) / trials);
    CHECK(std::abs(static_cast<double>(hits) / trials - p) <= 3.0 * sigma);
}

TEST_CASE("evaluate_task skips empty-test languages and is deterministic") {
    auto task = news_task();
    IclSplit full;
    full.train = {{"t1", "sports"}, {"t2", "health"}};
    full.test = {{"q1", "sports"}};
    IclSplit empty_test;
    empty_test.train = {{"t1", "sports"}};
    task.data[LanguageTag::parse("aaa_Latn")] = full;
    task.data[LanguageTag::parse("bbb_Latn")] = empty_test;

    UniformScorer scorer;
    ShotSelector sel;
    sel.seed = 3;
    auto r1 = evaluate_task(scorer, task, 1, sel);
    auto r2 = evaluate_task(scorer, task, 1, sel);
    CHECK(r1.per_language_accuracy.size() == 1);
    CHECK(r1.per_language_accuracy == r2.per_language_accuracy);
    CHECK(r1.macro_average == r2.macro_average);
}

TEST_CASE("shot_sweep returns one report per k with shared seed") {
    auto task = news_task();
    IclSplit split;
    split.train = {{"t1", "sports"}, {"t2", "health"}, {"t3", "travel"}};
    split.test = {{"q1", "sports"}, {"q2", "health"}};
    task.data[LanguageTag::parse("aaa_Latn")] = split;

    UniformScorer scorer;
    ShotSelector sel;
    sel.seed = 5;
    auto reports = shot_sweep(scorer, task, {0, 1, 2}, sel);
    REQUIRE(reports.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(reports[i].n_shots == i);
        CHECK(reports[i].seed == 5);
    }
}
