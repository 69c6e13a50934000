// SPDX-License-Identifier: Apache-2.0
#include "mala/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace mala {

using nlohmann::ordered_json;

namespace {

std::string to_hex(std::string_view bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char c : bytes) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0xf]);
    }
    return out;
}

std::string from_hex(std::string_view hex) {
    if (hex.size() % 2 != 0) throw std::runtime_error("odd-length hex token");
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw std::runtime_error("bad hex digit");
    };
    std::string out;
    out.reserve(hex.size() / 2);
    for (std::size_t i = 0; i < hex.size(); i += 2)
        out.push_back(static_cast<char>((nib(hex[i]) << 4) | nib(hex[i + 1])));
    return out;
}

}  // namespace

bool TokenizerModel::byte_complete() const {
    if (entries.size() < 256) return false;
    std::array<bool, 256> seen{};
    for (const auto& e : entries)
        if (e.bytes.size() == 1) seen[static_cast<unsigned char>(e.bytes[0])] = true;
    return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

const TokenEntry* TokenizerModel::find(std::string_view bytes) const {
    auto it = token_to_id.find(std::string(bytes));
    return it == token_to_id.end() ? nullptr : &entries[it->second];
}

void TokenizerModel::rebuild_index() {
    token_to_id.clear();
    merge_index.clear();
    id_merge_index.clear();
    for (const auto& e : entries) {
        if (!token_to_id.emplace(e.bytes, e.id).second)
            throw std::runtime_error("duplicate token byte string in vocabulary");
    }
    for (std::size_t i = 0; i < merges.size(); ++i) {
        merge_index.emplace(merges[i], i);
        auto l = token_to_id.find(merges[i].first);
        auto r = token_to_id.find(merges[i].second);
        auto prod = token_to_id.find(merges[i].first + merges[i].second);
        if (l == token_to_id.end() || r == token_to_id.end() || prod == token_to_id.end())
            throw std::runtime_error("merge rule references token missing from vocabulary");
        id_merge_index.try_emplace({l->second, r->second}, i, prod->second);
    }
}

TokenizerModel byte_tokenizer() {
    TokenizerModel m;
    m.entries.reserve(256);
    for (std::uint32_t b = 0; b < 256; ++b)
        m.entries.push_back({std::string(1, static_cast<char>(b)), b, static_cast<std::int32_t>(b)});
    m.rebuild_index();
    return m;
}

TokenizerModel train_subword(const std::vector<std::string>& corpus, std::size_t vocab_size,
                             std::uint64_t /*seed*/, bool presplit_whitespace) {
    if (vocab_size <= 256 && vocab_size != 256)
        throw std::invalid_argument("vocab_size must be >= 256");
    if (corpus.empty()) throw std::invalid_argument("corpus is empty");

    TokenizerModel model = byte_tokenizer();

    // Working sequences of token ids; pairs never cross chunk boundaries.
    std::vector<std::vector<std::uint32_t>> chunks;
    for (const auto& line : corpus) {
        if (line.empty()) continue;
        if (presplit_whitespace) {
            std::vector<std::uint32_t> cur;
            for (unsigned char c : line) {
                if (std::isspace(c)) {
                    if (!cur.empty()) chunks.push_back(std::move(cur));
                    chunks.push_back({c});
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            if (!cur.empty()) chunks.push_back(std::move(cur));
        } else {
            std::vector<std::uint32_t> cur(line.begin(), line.end());
            for (std::size_t i = 0; i < cur.size(); ++i)
                cur[i] = static_cast<unsigned char>(line[i]);
            chunks.push_back(std::move(cur));
        }
    }

    while (model.entries.size() < vocab_size) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> counts;
        for (const auto& seq : chunks)
            for (std::size_t i = 0; i + 1 < seq.size(); ++i)
                ++counts[{seq[i], seq[i + 1]}];

        // Highest count wins; ties fall to the smaller (left id, right id),
        // which std::map order already gives us.
        std::uint64_t best_count = 0;
        std::pair<std::uint32_t, std::uint32_t> best{};
        for (const auto& [pair, c] : counts) {
            if (c > best_count) {
                best_count = c;
                best = pair;
            }
        }
        if (best_count < 2) {
            if (model.entries.size() < vocab_size)
                warn("corpus exhausted at vocabulary size " + std::to_string(model.entries.size()));
            break;
        }

        const std::string merged_bytes = model.entries[best.first].bytes + model.entries[best.second].bytes;
        std::uint32_t new_id;
        if (auto it = model.token_to_id.find(merged_bytes); it != model.token_to_id.end()) {
            new_id = it->second;  // byte-string collision with an earlier merge product
        } else {
            new_id = static_cast<std::uint32_t>(model.entries.size());
            model.entries.push_back({merged_bytes, new_id, static_cast<std::int32_t>(new_id)});
            model.token_to_id.emplace(merged_bytes, new_id);
        }
        auto rule = std::make_pair(model.entries[best.first].bytes, model.entries[best.second].bytes);
        if (!model.merge_index.contains(rule)) {
            model.merge_index.emplace(rule, model.merges.size());
            model.merges.push_back(rule);
        }

        for (auto& seq : chunks) {
            std::size_t w = 0;
            for (std::size_t i = 0; i < seq.size();) {
                if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
                    seq[w++] = new_id;
                    i += 2;
                } else {
                    seq[w++] = seq[i++];
                }
            }
            seq.resize(w);
        }
    }

    model.rebuild_index();
    return model;
}

std::pair<TokenizerModel, MergeReport> merge_vocabularies(const TokenizerModel& base,
                                                          const TokenizerModel& trained) {
    if (!base.byte_complete() || !trained.byte_complete())
        throw std::invalid_argument("merge_vocabularies requires byte-complete models");

    TokenizerModel merged;
    merged.byte_fallback = base.byte_fallback;
    merged.entries = base.entries;

    std::int32_t max_rank = 0;
    for (const auto& e : base.entries) max_rank = std::max(max_rank, e.rank);

    MergeReport report;
    report.base_size = base.entries.size();
    report.trained_size = trained.entries.size();

    merged.rebuild_index();
    std::int32_t next_rank = max_rank + 1;
    for (const auto& e : trained.entries) {
        if (merged.token_to_id.contains(e.bytes)) {
            ++report.overlap_size;
            continue;
        }
        const auto id = static_cast<std::uint32_t>(merged.entries.size());
        merged.entries.push_back({e.bytes, id, next_rank++});
        merged.token_to_id.emplace(e.bytes, id);
    }
    report.union_size = merged.entries.size();

    merged.merges = base.merges;
    std::map<std::pair<std::string, std::string>, bool> seen;
    for (const auto& m : merged.merges) seen[m] = true;
    for (const auto& m : trained.merges) {
        if (seen.contains(m)) continue;
        if (!merged.token_to_id.contains(m.first + m.second)) continue;  // operand product lost
        seen[m] = true;
        merged.merges.push_back(m);
    }
    merged.rebuild_index();
    return {std::move(merged), report};
}

std::vector<std::uint32_t> encode(const TokenizerModel& model, std::string_view text) {
    std::vector<std::uint32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(model.token_to_id.at(std::string(1, static_cast<char>(c))));

    // Repeatedly apply the earliest-ranked merge present anywhere in the
    // sequence, collapsing every occurrence left to right.
    while (ids.size() >= 2) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        std::uint32_t best_left = 0, best_right = 0, merged_id = 0;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = model.id_merge_index.find({ids[i], ids[i + 1]});
            if (it != model.id_merge_index.end() && it->second.first < best_rank) {
                best_rank = it->second.first;
                best_left = ids[i];
                best_right = ids[i + 1];
                merged_id = it->second.second;
            }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        std::size_t w = 0;
        for (std::size_t i = 0; i < ids.size();) {
            if (i + 1 < ids.size() && ids[i] == best_left && ids[i + 1] == best_right) {
                ids[w++] = merged_id;
                i += 2;
            } else {
                ids[w++] = ids[i++];
            }
        }
        ids.resize(w);
    }
    return ids;
}

std::string decode(const TokenizerModel& model, std::span<const std::uint32_t> ids) {
    std::string out;
    for (std::uint32_t id : ids) {
        if (id >= model.entries.size())
            throw std::out_of_range("unknown token id in decode: " + std::to_string(id));
        out += model.entries[id].bytes;
    }
    return out;
}

SegmentationReport segmentation_reduction(
    const TokenizerModel& base, const TokenizerModel& extended,
    const std::vector<std::pair<LanguageTag, std::string>>& texts) {
    if (!base.byte_complete() || !extended.byte_complete())
        throw std::invalid_argument("segmentation_reduction requires byte-complete models");
    SegmentationReport report;
    for (const auto& [lang, text] : texts) {
        if (text.empty()) {
            warn("empty text for " + lang.str() + ", segmentation row omitted");
            continue;
        }
        SegmentationRow row;
        row.lang = lang;
        row.tokens_base = encode(base, text).size();
        row.tokens_extended = encode(extended, text).size();
        row.reduction = 1.0 - static_cast<double>(row.tokens_extended) /
                                  static_cast<double>(row.tokens_base);
        report.rows.push_back(row);
    }
    return report;
}

void save_tokenizer(const TokenizerModel& model, const std::filesystem::path& path) {
    ordered_json j;
    j["version"] = std::string(kToolkitVersion);
    j["byte_fallback"] = model.byte_fallback;
    j["entries"] = ordered_json::array();
    for (const auto& e : model.entries)
        j["entries"].push_back({{"hex_bytes", to_hex(e.bytes)}, {"id", e.id}, {"rank", e.rank}});
    j["merges"] = ordered_json::array();
    for (const auto& [l, r] : model.merges)
        j["merges"].push_back({to_hex(l), to_hex(r)});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

TokenizerModel load_tokenizer(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    TokenizerModel m;
    m.byte_fallback = j.at("byte_fallback").get<bool>();
    for (const auto& e : j.at("entries"))
        m.entries.push_back({from_hex(e.at("hex_bytes").get<std::string>()),
                             e.at("id").get<std::uint32_t>(), e.at("rank").get<std::int32_t>()});
    std::sort(m.entries.begin(), m.entries.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    for (const auto& e : j.at("merges"))
        m.merges.emplace_back(from_hex(e.at(0).get<std::string>()),
                              from_hex(e.at(1).get<std::string>()));
    m.rebuild_index();
    return m;
}

}  // namespace mala
