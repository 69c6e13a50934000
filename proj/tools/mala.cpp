// SPDX-License-Identifier: Apache-2.0
//
// Pipeline driver: each subcommand wraps one library operation and writes
// artifacts stamped with (config hash, seed, toolkit version).
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mala/analysis.hpp"
#include "mala/corpus.hpp"
#include "mala/eval_icl.hpp"
#include "mala/eval_nll.hpp"
#include "mala/model.hpp"
#include "mala/tokenizer.hpp"
#include "mala/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace mala;

namespace {

// ---------------------------------------------------------------------------
// Run configuration: one document, profile presets, flag overrides on top.

struct RunConfig {
    double alpha = 0.3;
    std::size_t vocab_size = 2000;
    ModelConfig model;
    LoraConfig lora;
    bool use_lora = true;
    TrainConfig train;
    std::size_t eval_stride = 0;  // 0 -> context/2
    std::vector<std::size_t> shot_counts{0, 1, 2, 4};
    std::string selector = "random";
    std::uint64_t seed = 0;
    fs::path out = "runs/default";

    ordered_json to_json() const;
    void overlay(const json& j);
    void apply_profile(const std::string& name);
};

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["alpha"] = alpha;
    j["vocab_size"] = vocab_size;
    j["model"] = {{"vocab_size", model.vocab_size}, {"d_model", model.d_model},
                  {"n_layers", model.n_layers},    {"n_heads", model.n_heads},
                  {"d_ff", model.d_ff},            {"context_len", model.context_len},
                  {"seed", model.seed}};
    std::vector<std::string> targets;
    for (auto t : lora.targets) targets.push_back(to_string(t));
    j["lora"] = {{"enabled", use_lora},
                 {"rank", lora.rank},
                 {"alpha", lora.alpha},
                 {"dropout", lora.dropout},
                 {"targets", targets}};
    j["train"] = {{"learning_rate", train.learning_rate},
                  {"weight_decay", train.weight_decay},
                  {"batch_size", train.batch_size},
                  {"context_len", train.context_len},
                  {"epochs", train.epochs},
                  {"checkpoint_every", train.checkpoint_every},
                  {"warmup_steps", train.warmup_steps},
                  {"max_steps", train.max_steps},
                  {"seed", train.seed}};
    j["eval"] = {{"stride", eval_stride}, {"shot_counts", shot_counts}, {"selector", selector}};
    j["seed"] = seed;
    j["out"] = out.string();
    return j;
}

void RunConfig::overlay(const json& j) {
    if (j.contains("alpha")) alpha = j["alpha"].get<double>();
    if (j.contains("vocab_size")) vocab_size = j["vocab_size"].get<std::size_t>();
    if (j.contains("model")) {
        const auto& m = j["model"];
        if (m.contains("vocab_size")) model.vocab_size = m["vocab_size"].get<std::size_t>();
        if (m.contains("d_model")) model.d_model = m["d_model"].get<std::size_t>();
        if (m.contains("n_layers")) model.n_layers = m["n_layers"].get<std::size_t>();
        if (m.contains("n_heads")) model.n_heads = m["n_heads"].get<std::size_t>();
        if (m.contains("d_ff")) model.d_ff = m["d_ff"].get<std::size_t>();
        if (m.contains("context_len")) model.context_len = m["context_len"].get<std::size_t>();
        if (m.contains("seed")) model.seed = m["seed"].get<std::uint64_t>();
    }
    if (j.contains("lora")) {
        const auto& l = j["lora"];
        if (l.contains("enabled")) use_lora = l["enabled"].get<bool>();
        if (l.contains("rank")) lora.rank = l["rank"].get<std::size_t>();
        if (l.contains("alpha")) lora.alpha = l["alpha"].get<double>();
        if (l.contains("dropout")) lora.dropout = l["dropout"].get<double>();
        if (l.contains("targets")) {
            lora.targets.clear();
            for (const auto& t : l["targets"])
                lora.targets.push_back(lora_target_from_string(t.get<std::string>()));
        }
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        if (t.contains("learning_rate")) train.learning_rate = t["learning_rate"].get<double>();
        if (t.contains("weight_decay")) train.weight_decay = t["weight_decay"].get<double>();
        if (t.contains("batch_size")) train.batch_size = t["batch_size"].get<std::size_t>();
        if (t.contains("context_len")) train.context_len = t["context_len"].get<std::size_t>();
        if (t.contains("epochs")) train.epochs = t["epochs"].get<std::size_t>();
        if (t.contains("checkpoint_every"))
            train.checkpoint_every = t["checkpoint_every"].get<std::size_t>();
        if (t.contains("warmup_steps")) train.warmup_steps = t["warmup_steps"].get<std::size_t>();
        if (t.contains("max_steps")) train.max_steps = t["max_steps"].get<std::size_t>();
        if (t.contains("seed")) train.seed = t["seed"].get<std::uint64_t>();
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        if (e.contains("stride")) eval_stride = e["stride"].get<std::size_t>();
        if (e.contains("shot_counts"))
            shot_counts = e["shot_counts"].get<std::vector<std::size_t>>();
        if (e.contains("selector")) selector = e["selector"].get<std::string>();
    }
    if (j.contains("seed")) seed = j["seed"].get<std::uint64_t>();
    if (j.contains("out")) out = j["out"].get<std::string>();
}

void RunConfig::apply_profile(const std::string& name) {
    if (name == "desk") {
        model = ModelConfig{};  // tiny defaults
        model.context_len = 128;
        train = TrainConfig{};
        train.batch_size = 8;
        train.context_len = 128;
        vocab_size = 2000;
    } else if (name == "paper") {
        model.d_model = 4096;
        model.n_layers = 32;
        model.n_heads = 32;
        model.d_ff = 11008;
        model.context_len = 4096;
        model.vocab_size = 260164;
        vocab_size = 250000;
        train.learning_rate = 3e-4;
        train.weight_decay = 0.01;
        train.batch_size = 384;
        train.context_len = 4096;
        train.epochs = 3;
        train.checkpoint_every = 500;
        lora = LoraConfig{};  // r=8, alpha=32, dropout 0.05, q/v
    } else {
        throw std::runtime_error("unknown profile '" + name + "' (expected paper or desk)");
    }
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(cfg.to_json().dump())); }

ordered_json meta_block(const RunConfig& cfg) {
    return {{"config_hash", config_hash(cfg)},
            {"seed", cfg.seed},
            {"version", std::string(kToolkitVersion)}};
}

void write_json(const fs::path& path, const ordered_json& j) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::ofstream open_csv(const fs::path& path, const RunConfig& cfg) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "# config_hash=" << config_hash(cfg) << " seed=" << cfg.seed
        << " version=" << kToolkitVersion << '\n';
    return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Tokenizer files carry their own schema; stamp the meta block in-place.
void stamp_tokenizer(const fs::path& path, const RunConfig& cfg) {
    ordered_json j = ordered_json::parse(read_file(path));
    j["meta"] = meta_block(cfg);
    write_json(path, j);
}

AdaptedModel load_model_or_fresh(const std::string& ckpt, const RunConfig& cfg,
                                 std::size_t vocab_override = 0) {
    if (!ckpt.empty()) return load_checkpoint(ckpt);
    ModelConfig mc = cfg.model;
    if (vocab_override) mc.vocab_size = vocab_override;
    return build_model(mc);
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_sample(const RunConfig& cfg, const std::string& corpus_root, std::uint64_t total,
               const std::string& purpose, bool multinomial) {
    auto manifest = ingest_corpus(corpus_root);
    auto plan = compute_sampling(manifest, cfg.alpha, sampling_purpose_from_string(purpose), total);
    auto sample = draw_sample(plan, manifest, cfg.seed, multinomial);
    auto sentences = materialize_sample(sample, manifest);

    ordered_json mj = manifest.to_json();
    mj["meta"] = meta_block(cfg);
    write_json(cfg.out / "manifest.json", mj);
    ordered_json pj = plan.to_json();
    pj["meta"] = meta_block(cfg);
    write_json(cfg.out / "plan.json", pj);
    ordered_json sj = sample.to_json();
    sj["meta"] = meta_block(cfg);
    write_json(cfg.out / "sample.json", sj);

    std::ofstream txt(cfg.out / "sample.txt", std::ios::binary);
    for (const auto& s : sentences) txt << s << '\n';

    for (const auto& [lang, n] : sample.allocations)
        std::cout << lang.str() << ' ' << n << '\n';
    return 0;
}

int cmd_train_tokenizer(const RunConfig& cfg, const std::vector<std::string>& inputs,
                        bool presplit) {
    std::vector<std::string> corpus;
    for (const auto& p : inputs) {
        auto lines = read_lines(p);
        corpus.insert(corpus.end(), lines.begin(), lines.end());
    }
    if (corpus.empty()) throw std::runtime_error("tokenizer training corpus is empty");
    auto model = train_subword(corpus, cfg.vocab_size, cfg.seed, presplit);
    const fs::path out = cfg.out / "tokenizer.json";
    save_tokenizer(model, out);
    stamp_tokenizer(out, cfg);
    std::cout << "vocab_size " << model.vocab_size() << '\n';
    return 0;
}

int cmd_merge_vocab(const RunConfig& cfg, const std::string& base_path,
                    const std::string& trained_path) {
    auto base = load_tokenizer(base_path);
    auto trained = load_tokenizer(trained_path);
    auto [merged, report] = merge_vocabularies(base, trained);
    const fs::path out = cfg.out / "merged_tokenizer.json";
    save_tokenizer(merged, out);
    stamp_tokenizer(out, cfg);
    ordered_json rj = {{"base_size", report.base_size},
                       {"trained_size", report.trained_size},
                       {"overlap_size", report.overlap_size},
                       {"union_size", report.union_size},
                       {"meta", meta_block(cfg)}};
    write_json(cfg.out / "merge_report.json", rj);
    std::cout << "union_size " << report.union_size << " overlap " << report.overlap_size << '\n';
    return 0;
}

int cmd_extend_model(const RunConfig& cfg, const std::string& ckpt, const std::string& tok_path,
                     const std::string& policy, double noise_sigma) {
    auto tok = load_tokenizer(tok_path);
    auto model = load_model_or_fresh(ckpt, cfg);
    const std::size_t old_vocab = model.config.vocab_size;
    if (tok.vocab_size() < old_vocab)
        throw std::runtime_error("tokenizer vocabulary (" + std::to_string(tok.vocab_size()) +
                                 ") smaller than the model's (" + std::to_string(old_vocab) + ")");
    resize_embeddings(model, tok.vocab_size(), resize_policy_from_string(policy), cfg.seed,
                      noise_sigma);
    if (cfg.use_lora) attach_lora(model, cfg.lora, cfg.seed);
    const fs::path dir = cfg.out / "model";
    save_checkpoint(model, dir, 0);
    write_json(dir / "meta.json", meta_block(cfg));
    auto counts = model.count_params();
    std::cout << "vocab " << old_vocab << " -> " << tok.vocab_size() << " trainable "
              << counts.trainable << " / " << counts.total << '\n';
    return 0;
}

int cmd_train(RunConfig cfg, const std::string& ckpt, const std::string& tok_path,
              const std::vector<std::string>& data, const std::string& val_file,
              std::uint32_t eot_id) {
    auto tok = load_tokenizer(tok_path);
    auto model = load_model_or_fresh(ckpt, cfg, tok.vocab_size());
    if (model.config.vocab_size < tok.vocab_size())
        throw std::runtime_error("model vocabulary smaller than tokenizer's; run extend-model first");

    std::vector<std::vector<std::uint32_t>> docs;
    for (const auto& p : data)
        for (const auto& line : read_lines(p)) docs.push_back(encode(tok, line));
    cfg.train.context_len = std::min(cfg.train.context_len, model.config.context_len);
    auto blocks = pack_stream(docs, cfg.train.context_len, eot_id);
    if (blocks.empty()) throw std::runtime_error("no full training blocks; provide more data");
    cfg.train.seed = cfg.seed;

    std::string val_text = val_file.empty() ? std::string() : read_file(val_file);
    MetricProbe probe = nullptr;
    if (!val_text.empty()) {
        probe = [&](const AdaptedModel& m, std::size_t) {
            auto rec = nll_for_language(m, tok, LanguageTag{"zzz", "Zzzz"}, val_text,
                                        cfg.eval_stride);
            return std::map<std::string, double>{{"validation_nll", rec.nll_per_token}};
        };
    }

    auto checkpoints = train(model, blocks, cfg.train, cfg.out, probe);

    ordered_json summary;
    summary["meta"] = meta_block(cfg);
    summary["blocks"] = blocks.size();
    summary["steps"] = checkpoints.empty() ? 0 : checkpoints.back().step;
    summary["final_loss"] = checkpoints.empty() ? 0.0 : checkpoints.back().train_loss;
    if (probe) {
        auto best = early_stop_select(checkpoints, "validation_nll",
                                      EarlyStopMetric::validation_nll);
        summary["best_step"] = best.step;
        summary["best_validation_nll"] = best.metrics.at("validation_nll");
        summary["best_snapshot"] = best.snapshot.string();
    }
    write_json(cfg.out / "summary.json", summary);
    std::cout << "steps " << summary["steps"] << " final_loss " << summary["final_loss"] << '\n';
    return 0;
}

// Texts live in <dir>/<lang>.txt; the whole file is one concatenated document.
std::vector<std::pair<LanguageTag, std::string>> load_eval_texts(const fs::path& dir) {
    std::vector<std::pair<LanguageTag, std::string>> texts;
    if (!fs::is_directory(dir)) throw std::runtime_error("text directory missing: " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".txt") continue;
        const std::string stem = entry.path().stem().string();
        if (!LanguageTag::valid(stem)) {
            warn("skipping text file with invalid language tag: " + stem);
            continue;
        }
        texts.emplace_back(LanguageTag::parse(stem), read_file(entry.path()));
    }
    std::sort(texts.begin(), texts.end(), [](auto& a, auto& b) { return a.first < b.first; });
    return texts;
}

int cmd_eval_nll(const RunConfig& cfg, const std::vector<std::string>& model_specs,
                 const std::string& texts_dir, const std::string& mode) {
    // spec format: name=checkpoint_dir=tokenizer.json
    std::vector<AdaptedModel> models;
    std::vector<TokenizerModel> toks;
    std::vector<NamedModel> named;
    models.reserve(model_specs.size());
    toks.reserve(model_specs.size());
    for (const auto& spec : model_specs) {
        const auto p1 = spec.find('=');
        const auto p2 = spec.find('=', p1 == std::string::npos ? p1 : p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos)
            throw std::runtime_error("bad --model spec '" + spec +
                                     "' (want name=checkpoint=tokenizer)");
        models.push_back(load_checkpoint(spec.substr(p1 + 1, p2 - p1 - 1)));
        toks.push_back(load_tokenizer(spec.substr(p2 + 1)));
        named.push_back({spec.substr(0, p1), &models.back(), &toks.back()});
    }
    const NllMode m = mode == "language" ? NllMode::language_comparable : NllMode::model_comparable;
    auto texts = load_eval_texts(texts_dir);
    auto rows = comparable_nll(named, texts, m, cfg.eval_stride);

    auto csv = open_csv(cfg.out / "nll.csv", cfg);
    csv << "model,lang,total_nll,token_count,byte_count,window_count,nll_per_token,nll_per_byte\n";
    ordered_json rec_array = ordered_json::array();
    for (const auto& [name, r] : rows) {
        csv << name << ',' << r.lang.str() << ',' << r.total_nll << ',' << r.token_count << ','
            << r.byte_count << ',' << r.window_count << ',' << r.nll_per_token << ','
            << r.nll_per_byte << '\n';
        rec_array.push_back({{"model", name},
                             {"lang", r.lang.str()},
                             {"total_nll", r.total_nll},
                             {"token_count", r.token_count},
                             {"byte_count", r.byte_count},
                             {"window_count", r.window_count},
                             {"nll_per_token", r.nll_per_token},
                             {"nll_per_byte", r.nll_per_byte}});
    }
    write_json(cfg.out / "nll.json",
               ordered_json{{"meta", meta_block(cfg)}, {"mode", mode}, {"records", rec_array}});
    std::cout << rows.size() << " records\n";
    return 0;
}

ShotSelector make_selector(const RunConfig& cfg, const AdaptedModel& model,
                           const TokenizerModel& tok, std::size_t embed_layer) {
    ShotSelector sel;
    sel.seed = cfg.seed;
    if (cfg.selector == "retrieval") {
        sel.kind = ShotSelector::Kind::retrieval;
        sel.embedder = {&model, &tok,
                        embed_layer ? embed_layer : model.config.n_layers / 2};
    } else if (cfg.selector != "random") {
        throw std::runtime_error("unknown selector '" + cfg.selector + "'");
    }
    return sel;
}

ordered_json report_to_json(const EvalReport& r) {
    ordered_json per;
    for (const auto& [lang, acc] : r.per_language_accuracy) per[lang.str()] = acc;
    return {{"n_shots", r.n_shots},
            {"selector", r.selector},
            {"seed", r.seed},
            {"macro_average", r.macro_average},
            {"per_language_accuracy", per}};
}

int cmd_eval_icl(const RunConfig& cfg, const std::string& ckpt, const std::string& tok_path,
                 const std::string& task_dir, std::size_t k, std::size_t embed_layer,
                 bool length_normalize) {
    auto tok = load_tokenizer(tok_path);
    auto model = load_checkpoint(ckpt);
    auto task = load_task(task_dir);
    ModelScorer scorer(model, tok, length_normalize);
    auto sel = make_selector(cfg, model, tok, embed_layer);
    auto report = evaluate_task(scorer, task, k, sel);

    ordered_json j = {{"meta", meta_block(cfg)}, {"task", task.name}};
    j["report"] = report_to_json(report);
    write_json(cfg.out / "icl.json", j);
    auto csv = open_csv(cfg.out / "icl.csv", cfg);
    csv << "lang,accuracy\n";
    for (const auto& [lang, acc] : report.per_language_accuracy)
        csv << lang.str() << ',' << acc << '\n';
    csv << "macro," << report.macro_average << '\n';
    std::cout << "macro_average " << report.macro_average << '\n';
    return 0;
}

int cmd_sweep_shots(const RunConfig& cfg, const std::string& ckpt, const std::string& tok_path,
                    const std::string& task_dir, std::size_t embed_layer, bool length_normalize) {
    auto tok = load_tokenizer(tok_path);
    auto model = load_checkpoint(ckpt);
    auto task = load_task(task_dir);
    ModelScorer scorer(model, tok, length_normalize);
    auto sel = make_selector(cfg, model, tok, embed_layer);
    auto reports = shot_sweep(scorer, task, cfg.shot_counts, sel);

    ordered_json arr = ordered_json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    write_json(cfg.out / "sweep.json",
               ordered_json{{"meta", meta_block(cfg)}, {"task", task.name}, {"reports", arr}});
    auto csv = open_csv(cfg.out / "sweep.csv", cfg);
    csv << "n_shots,lang,accuracy\n";
    for (const auto& r : reports) {
        for (const auto& [lang, acc] : r.per_language_accuracy)
            csv << r.n_shots << ',' << lang.str() << ',' << acc << '\n';
        csv << r.n_shots << ",macro," << r.macro_average << '\n';
    }
    for (const auto& r : reports)
        std::cout << "k=" << r.n_shots << " macro " << r.macro_average << '\n';
    return 0;
}

struct NllCsvRow {
    std::string model;
    LanguageTag lang;
    std::map<std::string, double> cols;
};

std::vector<NllCsvRow> parse_nll_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string() + " (produced by eval-nll)");
    std::string line;
    std::vector<std::string> header;
    std::vector<NllCsvRow> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (header.empty()) {
            header = fields;
            continue;
        }
        NllCsvRow row;
        row.model = fields.at(0);
        row.lang = LanguageTag::parse(fields.at(1));
        for (std::size_t i = 2; i < fields.size() && i < header.size(); ++i)
            row.cols[header[i]] = std::stod(fields[i]);
        rows.push_back(std::move(row));
    }
    return rows;
}

int cmd_report(const RunConfig& cfg, const std::string& nll_csv, const std::string& baseline,
               const std::string& adapted, const std::vector<double>& bin_edges,
               const std::string& metric, const std::string& family_map_path,
               const std::string& manifest_path, std::size_t top_n, bool plot_data) {
    auto rows = parse_nll_csv(nll_csv);
    std::map<LanguageTag, double> base_scores, adapted_scores;
    for (const auto& r : rows) {
        if (!r.cols.count(metric))
            throw std::runtime_error("metric column '" + metric + "' not in " + nll_csv);
        if (r.model == baseline) base_scores[r.lang] = r.cols.at(metric);
        if (r.model == adapted) adapted_scores[r.lang] = r.cols.at(metric);
    }
    if (base_scores.empty())
        throw std::runtime_error("model '" + baseline + "' has no rows in " + nll_csv);
    if (adapted_scores.empty())
        throw std::runtime_error("model '" + adapted + "' has no rows in " + nll_csv);

    ordered_json out;
    out["meta"] = meta_block(cfg);
    out["metric"] = metric;

    // Score distribution of the adapted model.
    BinSpec spec{bin_edges};
    spec.validate();
    std::vector<double> scores;
    for (const auto& [lang, s] : adapted_scores) scores.push_back(s);
    auto bins = bin_scores(scores, spec);
    ordered_json bj;
    auto labels = spec.labels();
    for (std::size_t i = 0; i < bins.counts.size(); ++i) bj[labels[i]] = bins.counts[i];
    bj["non_finite"] = bins.non_finite;
    out["bins"] = bj;

    // Improvement per language: positive delta = lower (better) adapted score.
    auto gains = gain_table(adapted_scores, base_scores, top_n);
    auto gain_rows = [](const std::vector<GainRow>& rows) {
        ordered_json arr = ordered_json::array();
        for (const auto& g : rows) arr.push_back({{"lang", g.lang.str()}, {"delta", g.delta}});
        return arr;
    };
    out["gains"] = {{"high_end", gain_rows(gains.high_end)},
                    {"low_end", gain_rows(gains.low_end)},
                    {"all", gain_rows(gains.all)}};

    if (!family_map_path.empty()) {
        auto fam = FamilyMap::load(family_map_path);
        std::vector<std::pair<LanguageTag, double>> records(adapted_scores.begin(),
                                                            adapted_scores.end());
        ordered_json fj = ordered_json::array();
        for (const auto& agg : aggregate_by_family(records, fam))
            fj.push_back({{"family", agg.family},
                          {"mean", agg.mean},
                          {"member_count", agg.member_count}});
        out["families"] = fj;
    }

    if (!manifest_path.empty()) {
        auto manifest = CorpusManifest::from_json(json::parse(read_file(manifest_path)));
        std::vector<double> sizes, log_sizes, deltas;
        for (const auto& g : gains.all) {
            for (const auto& e : manifest.entries) {
                if (e.lang == g.lang && e.sentence_count > 0) {
                    sizes.push_back(static_cast<double>(e.sentence_count));
                    log_sizes.push_back(std::log(static_cast<double>(e.sentence_count)));
                    deltas.push_back(g.delta);
                }
            }
        }
        if (sizes.size() >= 2) {
            ordered_json cj;
            try {
                cj["size_vs_gain"] = pearson(sizes, deltas).r;
                cj["log_size_vs_gain"] = pearson(log_sizes, deltas).r;
                cj["n"] = sizes.size();
            } catch (const std::exception& e) {
                cj["error"] = e.what();
            }
            out["correlations"] = cj;
        } else {
            warn("too few languages shared with the manifest for correlations");
        }
    }

    if (plot_data) {
        // Series shaped for external plotting: one (x, y) pair per point.
        ordered_json series = ordered_json::array();
        for (std::size_t i = 0; i < bins.counts.size(); ++i)
            series.push_back({{"x", labels[i]}, {"y", bins.counts[i]}});
        out["plot_data"] = {{"bin_series", series}};
    }

    write_json(cfg.out / "report.json", out);
    std::cout << "report written: " << (cfg.out / "report.json").string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multilingual adaptation pipeline"};
    app.require_subcommand(1);
    // Global options remain usable after the subcommand name.
    app.fallthrough();

    std::string config_path, profile;
    RunConfig cfg;
    app.add_option("--config", config_path, "JSON run configuration")->capture_default_str();
    app.add_option("--profile", profile, "Hyperparameter preset: paper or desk");
    auto* seed_opt = app.add_option("--seed", cfg.seed, "Global seed");
    auto* out_opt = app.add_option("--out", cfg.out, "Output directory");
    auto* alpha_opt = app.add_option("--alpha", cfg.alpha, "Sampling temperature exponent");
    auto* vocab_opt = app.add_option("--vocab-size", cfg.vocab_size, "Tokenizer vocabulary size");
    auto* stride_opt = app.add_option("--stride", cfg.eval_stride, "Window stride (0 = ctx/2)");
    auto* selector_opt = app.add_option("--selector", cfg.selector, "Shot selector: random or retrieval");
    auto* shots_list_opt =
        app.add_option("--shot-counts", cfg.shot_counts, "Shot counts for sweep-shots");
    auto* lr_opt = app.add_option("--lr", cfg.train.learning_rate, "Learning rate");
    auto* wd_opt = app.add_option("--weight-decay", cfg.train.weight_decay, "Weight decay");
    auto* batch_opt = app.add_option("--batch-size", cfg.train.batch_size, "Sequences per step");
    auto* ctx_opt = app.add_option("--context-len", cfg.train.context_len, "Training context");
    auto* epochs_opt = app.add_option("--epochs", cfg.train.epochs, "Training epochs");
    auto* ckpt_every_opt =
        app.add_option("--checkpoint-every", cfg.train.checkpoint_every, "Steps per checkpoint");
    auto* max_steps_opt = app.add_option("--max-steps", cfg.train.max_steps, "Step cap (0 = off)");
    auto* warmup_opt = app.add_option("--warmup-steps", cfg.train.warmup_steps, "Linear warmup");
    auto* d_model_opt = app.add_option("--d-model", cfg.model.d_model, "Model width");
    auto* layers_opt = app.add_option("--n-layers", cfg.model.n_layers, "Transformer blocks");
    auto* heads_opt = app.add_option("--n-heads", cfg.model.n_heads, "Attention heads");
    auto* dff_opt = app.add_option("--d-ff", cfg.model.d_ff, "Feed-forward width");
    auto* model_ctx_opt =
        app.add_option("--model-context", cfg.model.context_len, "Model context length");
    auto* model_vocab_opt =
        app.add_option("--model-vocab", cfg.model.vocab_size, "Model vocabulary size");
    auto* lora_rank_opt = app.add_option("--lora-rank", cfg.lora.rank, "LoRA rank");
    auto* lora_alpha_opt = app.add_option("--lora-alpha", cfg.lora.alpha, "LoRA alpha");
    auto* lora_dropout_opt = app.add_option("--lora-dropout", cfg.lora.dropout, "LoRA dropout");
    std::vector<std::string> lora_targets;
    auto* lora_targets_opt =
        app.add_option("--lora-targets", lora_targets, "LoRA targets (query,key,value,output,ff)");
    bool no_lora = false;
    app.add_flag("--no-lora", no_lora, "Skip adapter attachment in extend-model");
    std::size_t workers = 1;
    app.add_option("--workers", workers, "Worker count for eval commands")
        ->check(CLI::PositiveNumber);

    // sample
    auto* sample = app.add_subcommand("sample", "Draw an alpha-weighted corpus sample");
    std::string corpus_root, purpose = "training";
    std::uint64_t total = 0;
    bool multinomial = false;
    sample->add_option("--corpus", corpus_root, "Corpus root with <lang>.txt files")->required();
    sample->add_option("--total", total, "Total sentences to draw")->required();
    sample->add_option("--purpose", purpose, "vocab_build or training");
    sample->add_flag("--multinomial", multinomial, "Seeded categorical draw instead of quotas");

    // train-tokenizer
    auto* train_tok = app.add_subcommand("train-tokenizer", "Train a byte-pair vocabulary");
    std::vector<std::string> tok_inputs;
    bool presplit = false;
    train_tok->add_option("--input", tok_inputs, "Text file(s), one sentence per line")->required();
    train_tok->add_flag("--presplit-whitespace", presplit, "Keep merges within whitespace chunks");

    // merge-vocab
    auto* merge = app.add_subcommand("merge-vocab", "Union-merge two tokenizers");
    std::string base_tok, trained_tok;
    merge->add_option("base", base_tok, "Base tokenizer JSON")->required();
    merge->add_option("trained", trained_tok, "Trained tokenizer JSON")->required();

    // extend-model
    auto* extend = app.add_subcommand("extend-model", "Resize embeddings and attach adapters");
    std::string extend_ckpt, extend_tok, policy = "mean_noise";
    double noise_sigma = 0.02;
    extend->add_option("--model", extend_ckpt, "Checkpoint directory (omit for a fresh model)");
    extend->add_option("--tokenizer", extend_tok, "Extended tokenizer JSON")->required();
    extend->add_option("--policy", policy, "New-row init: mean_noise, zeros, gaussian");
    extend->add_option("--noise-sigma", noise_sigma, "Noise scale for mean_noise/gaussian");

    // train
    auto* train_cmd = app.add_subcommand("train", "Continued pretraining");
    std::string train_ckpt, train_tok_path, val_file;
    std::vector<std::string> train_data;
    std::uint32_t eot_id = 0;
    train_cmd->add_option("--model", train_ckpt, "Checkpoint directory (omit for a fresh model)");
    train_cmd->add_option("--tokenizer", train_tok_path, "Tokenizer JSON")->required();
    train_cmd->add_option("--data", train_data, "Training text file(s), one document per line")
        ->required();
    train_cmd->add_option("--val-data", val_file, "Held-out text for checkpoint metrics");
    train_cmd->add_option("--eot-id", eot_id, "End-of-text token id for stream packing");

    // eval-nll
    auto* nll_cmd = app.add_subcommand("eval-nll", "Sliding-window NLL per language");
    std::vector<std::string> nll_models;
    std::string texts_dir, nll_mode = "model";
    nll_cmd->add_option("--model", nll_models, "name=checkpoint=tokenizer (repeatable)")
        ->required();
    nll_cmd->add_option("--texts", texts_dir, "Directory of <lang>.txt files")->required();
    nll_cmd->add_option("--mode", nll_mode, "model or language comparability");

    // eval-icl
    auto* icl_cmd = app.add_subcommand("eval-icl", "Few-shot classification accuracy");
    std::string icl_ckpt, icl_tok, task_dir;
    std::size_t icl_shots = 3, embed_layer = 0;
    bool length_normalize = false;
    icl_cmd->add_option("--model", icl_ckpt, "Checkpoint directory")->required();
    icl_cmd->add_option("--tokenizer", icl_tok, "Tokenizer JSON")->required();
    icl_cmd->add_option("--task", task_dir, "Task directory (task.json + per-language splits)")
        ->required();
    icl_cmd->add_option("--shots", icl_shots, "In-context examples per query");
    icl_cmd->add_option("--embed-layer", embed_layer, "Retriever layer (0 = middle)");
    icl_cmd->add_flag("--length-normalize", length_normalize, "Mean instead of summed label logprob");

    // sweep-shots
    auto* sweep_cmd = app.add_subcommand("sweep-shots", "Accuracy across shot counts");
    std::string sweep_ckpt, sweep_tok, sweep_task;
    sweep_cmd->add_option("--model", sweep_ckpt, "Checkpoint directory")->required();
    sweep_cmd->add_option("--tokenizer", sweep_tok, "Tokenizer JSON")->required();
    sweep_cmd->add_option("--task", sweep_task, "Task directory")->required();
    sweep_cmd->add_option("--embed-layer", embed_layer, "Retriever layer (0 = middle)");
    sweep_cmd->add_flag("--length-normalize", length_normalize,
                        "Mean instead of summed label logprob");

    // report
    auto* report_cmd = app.add_subcommand("report", "Bins, gains, families, correlations");
    std::string report_nll, report_baseline = "base", report_adapted = "adapted";
    std::string report_metric = "nll_per_token", family_map_path, manifest_path;
    std::vector<double> bin_edges;
    std::size_t top_n = 3;
    bool plot_data = false;
    report_cmd->add_option("--nll", report_nll, "nll.csv from eval-nll")->required();
    report_cmd->add_option("--baseline", report_baseline, "Baseline model name in the CSV");
    report_cmd->add_option("--adapted", report_adapted, "Adapted model name in the CSV");
    report_cmd->add_option("--bin-edges", bin_edges, "Ascending bin edges")->required();
    report_cmd->add_option("--metric", report_metric, "CSV column to analyse");
    report_cmd->add_option("--family-map", family_map_path, "Language-to-family JSON");
    report_cmd->add_option("--manifest", manifest_path, "Corpus manifest for size correlations");
    report_cmd->add_option("--top-n", top_n, "Rows in the high/low gain tables");
    report_cmd->add_flag("--plot-data", plot_data, "Emit plottable series in the report");

    try {
        app.parse(argc, argv);

        // Precedence: profile < config file < explicit flags.
        RunConfig resolved;
        if (!profile.empty()) resolved.apply_profile(profile);
        if (!config_path.empty()) resolved.overlay(json::parse(read_file(config_path)));
        auto take = [](const CLI::Option* opt, auto& dst, const auto& src) {
            if (opt->count() > 0) dst = src;
        };
        take(seed_opt, resolved.seed, cfg.seed);
        take(out_opt, resolved.out, cfg.out);
        take(alpha_opt, resolved.alpha, cfg.alpha);
        take(vocab_opt, resolved.vocab_size, cfg.vocab_size);
        take(stride_opt, resolved.eval_stride, cfg.eval_stride);
        take(selector_opt, resolved.selector, cfg.selector);
        take(shots_list_opt, resolved.shot_counts, cfg.shot_counts);
        take(lr_opt, resolved.train.learning_rate, cfg.train.learning_rate);
        take(wd_opt, resolved.train.weight_decay, cfg.train.weight_decay);
        take(batch_opt, resolved.train.batch_size, cfg.train.batch_size);
        take(ctx_opt, resolved.train.context_len, cfg.train.context_len);
        take(epochs_opt, resolved.train.epochs, cfg.train.epochs);
        take(ckpt_every_opt, resolved.train.checkpoint_every, cfg.train.checkpoint_every);
        take(max_steps_opt, resolved.train.max_steps, cfg.train.max_steps);
        take(warmup_opt, resolved.train.warmup_steps, cfg.train.warmup_steps);
        take(d_model_opt, resolved.model.d_model, cfg.model.d_model);
        take(layers_opt, resolved.model.n_layers, cfg.model.n_layers);
        take(heads_opt, resolved.model.n_heads, cfg.model.n_heads);
        take(dff_opt, resolved.model.d_ff, cfg.model.d_ff);
        take(model_ctx_opt, resolved.model.context_len, cfg.model.context_len);
        take(model_vocab_opt, resolved.model.vocab_size, cfg.model.vocab_size);
        take(lora_rank_opt, resolved.lora.rank, cfg.lora.rank);
        take(lora_alpha_opt, resolved.lora.alpha, cfg.lora.alpha);
        take(lora_dropout_opt, resolved.lora.dropout, cfg.lora.dropout);
        if (lora_targets_opt->count() > 0) {
            resolved.lora.targets.clear();
            for (const auto& t : lora_targets)
                resolved.lora.targets.push_back(lora_target_from_string(t));
        }
        if (no_lora) resolved.use_lora = false;
        resolved.model.seed = resolved.seed;

        if (sample->parsed())
            return cmd_sample(resolved, corpus_root, total, purpose, multinomial);
        if (train_tok->parsed()) return cmd_train_tokenizer(resolved, tok_inputs, presplit);
        if (merge->parsed()) return cmd_merge_vocab(resolved, base_tok, trained_tok);
        if (extend->parsed())
            return cmd_extend_model(resolved, extend_ckpt, extend_tok, policy, noise_sigma);
        if (train_cmd->parsed())
            return cmd_train(resolved, train_ckpt, train_tok_path, train_data, val_file, eot_id);
        if (nll_cmd->parsed()) return cmd_eval_nll(resolved, nll_models, texts_dir, nll_mode);
        if (icl_cmd->parsed())
            return cmd_eval_icl(resolved, icl_ckpt, icl_tok, task_dir, icl_shots, embed_layer,
                                length_normalize);
        if (sweep_cmd->parsed())
            return cmd_sweep_shots(resolved, sweep_ckpt, sweep_tok, sweep_task, embed_layer,
                                   length_normalize);
        if (report_cmd->parsed())
            return cmd_report(resolved, report_nll, report_baseline, report_adapted, bin_edges,
                              report_metric, family_map_path, manifest_path, top_n, plot_data);
        throw std::runtime_error("no subcommand selected");
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
