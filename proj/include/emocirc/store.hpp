#pragma once

// Batch elicitation over a grouped corpus, the persistent run archive, and the
// scenario-event-valence dataset schema used when driving a real model.
//
// Archive layout (single file): one JSON header line, one JSON metadata line
// per record, then the concatenated activation blobs as little-endian f64 in
// record and tap order. Activations round-trip losslessly.

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emotions.hpp"
#include "model.hpp"
#include "runtime.hpp"
#include "synthetic.hpp"
#include "threading.hpp"

namespace emocirc {

// ---- SEV schema --------------------------------------------------------------

struct SevRecord {
    std::string domain;
    std::string scenario;
    std::map<std::string, std::string> outcomes;  // positive / neutral / negative
};

inline std::vector<SevRecord> load_sev(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open SEV file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("SEV file '" + path + "': " + e.what());
    }
    if (!j.is_array()) throw FormatError("SEV file '" + path + "' must be a JSON array");

    std::vector<SevRecord> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& r = j[i];
        SevRecord rec;
        rec.domain = r.value("domain", "");
        rec.scenario = r.value("scenario", "");
        if (!r.contains("outcomes") || !r["outcomes"].is_object())
            throw FormatError("SEV record " + std::to_string(i) + " has no outcomes object");
        for (const char* key : {"positive", "neutral", "negative"}) {
            if (!r["outcomes"].contains(key) || !r["outcomes"][key].is_string() ||
                r["outcomes"][key].get<std::string>().empty())
                throw FormatError("SEV record " + std::to_string(i) + " (scenario '" +
                                  rec.scenario + "') is missing outcome '" + key + "'");
            rec.outcomes[key] = r["outcomes"][key].get<std::string>();
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- corpus groups and run records -------------------------------------------

// One scenario-event prompt in six emotion variants plus a neutral form.
struct PromptGroup {
    std::size_t id = 0;
    std::string valence;
    std::array<std::vector<TokenId>, kEmotionCount> variants;
    std::vector<TokenId> neutral;
};

inline std::vector<PromptGroup> to_prompt_groups(const std::vector<SyntheticGroup>& corpus) {
    std::vector<PromptGroup> out(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out[i].id = corpus[i].id;
        out[i].valence = corpus[i].valence;
        for (std::size_t e = 0; e < kEmotionCount; ++e) out[i].variants[e] = corpus[i].variant(e);
        out[i].neutral = corpus[i].neutral_prompt();
    }
    return out;
}

enum class SuccessFlag { Yes, No, Unknown };

inline const char* success_name(SuccessFlag s) {
    switch (s) {
        case SuccessFlag::Yes: return "yes";
        case SuccessFlag::No: return "no";
        case SuccessFlag::Unknown: return "unknown";
    }
    return "?";
}

inline SuccessFlag success_from_name(const std::string& s) {
    if (s == "yes") return SuccessFlag::Yes;
    if (s == "no") return SuccessFlag::No;
    if (s == "unknown") return SuccessFlag::Unknown;
    throw FormatError("bad success flag '" + s + "'");
}

struct RunRecord {
    std::size_t group_id = 0;
    std::string emotion;
    std::string valence;
    std::vector<TokenId> prompt;     // original tokens, kept for re-running
    std::vector<TokenId> generated;  // new tokens from the elicitation decode
    SuccessFlag success = SuccessFlag::Unknown;
    TapLog taps;

    std::string run_id() const { return std::to_string(group_id) + "/" + emotion; }
};

// Decides whether a run expressed its target emotion; empty optional = unknown.
using LabelOracle = std::function<std::optional<bool>(const RunRecord&)>;

inline LabelOracle planted_readout_oracle(const PlantedSpec& spec) {
    return [spec](const RunRecord& r) -> std::optional<bool> {
        if (r.generated.empty()) return std::nullopt;
        return r.generated.front() == spec.readout_tokens[emotion_index(r.emotion)];
    };
}

// Labels file: JSON object mapping run id to {"match": 0|1}.
inline LabelOracle labels_file_oracle(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open labels file '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("labels file '" + path + "': " + e.what());
    }
    std::map<std::string, bool> labels;
    for (auto it = j.begin(); it != j.end(); ++it)
        labels[it.key()] = it.value().at("match").get<int>() != 0;
    return [labels](const RunRecord& r) -> std::optional<bool> {
        auto it = labels.find(r.run_id());
        if (it == labels.end()) return std::nullopt;
        return it->second;
    };
}

struct ElicitationResult {
    std::vector<RunRecord> records;
    std::size_t skipped_groups = 0;
};

// Runs every variant of every complete group, capturing last-token taps at all
// sites plus a short greedy continuation for the label oracle.
inline ElicitationResult run_elicitation(const Model& model,
                                         const std::vector<PromptGroup>& groups,
                                         const LabelOracle& oracle = nullptr,
                                         std::size_t max_new = 2) {
    ElicitationResult result;
    std::vector<const PromptGroup*> usable;
    for (const auto& g : groups) {
        bool complete = true;
        for (const auto& v : g.variants)
            if (v.empty()) complete = false;
        if (!complete) {
            ++result.skipped_groups;
            continue;
        }
        usable.push_back(&g);
    }

    const auto taps = all_site_taps(model.config);
    result.records.resize(usable.size() * kEmotionCount);
    parallel_for(result.records.size(), [&](std::size_t idx) {
        const PromptGroup& g = *usable[idx / kEmotionCount];
        const std::size_t e = idx % kEmotionCount;
        RunRecord rec;
        rec.group_id = g.id;
        rec.emotion = kEmotions[e];
        rec.valence = g.valence;
        rec.prompt = g.variants[e];

        const auto full = greedy_generate(model, rec.prompt, max_new);
        rec.generated.assign(full.begin() + static_cast<std::ptrdiff_t>(rec.prompt.size()),
                             full.end());
        const ForwardResult fr = forward(model, rec.prompt, taps);
        rec.taps = fr.tap_log;
        rec.taps.sample_id = rec.run_id();
        rec.taps.emotion = rec.emotion;

        if (oracle) {
            const auto verdict = oracle(rec);
            rec.success = !verdict.has_value() ? SuccessFlag::Unknown
                          : *verdict            ? SuccessFlag::Yes
                                                : SuccessFlag::No;
        }
        result.records[idx] = std::move(rec);
    });
    return result;
}

// ---- run archive --------------------------------------------------------------

inline constexpr const char* kRunsFormat = "emocirc-runs";
inline constexpr int kRunsVersion = 1;

inline void save_runs(const std::vector<RunRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");

    nlohmann::json header = {{"format", kRunsFormat},
                             {"version", kRunsVersion},
                             {"n_records", records.size()}};
    f << header.dump() << "\n";

    for (const RunRecord& r : records) {
        nlohmann::json taps = nlohmann::json::array();
        std::size_t blob_doubles = 0;
        for (const TapRecord& t : r.taps.taps) {
            taps.push_back({{"layer", t.point.layer},
                            {"site", site_name(t.point.site)},
                            {"position",
                             t.point.position == PositionPolicy::LastPromptToken ? "last_prompt"
                                                                                 : "current"},
                            {"len", t.value.size()}});
            blob_doubles += t.value.size();
        }
        nlohmann::json meta = {{"group_id", r.group_id},
                               {"emotion", r.emotion},
                               {"valence", r.valence},
                               {"prompt", r.prompt},
                               {"generated", r.generated},
                               {"success", success_name(r.success)},
                               {"sample_id", r.taps.sample_id},
                               {"edit_plan_hash", r.taps.edit_plan_hash},
                               {"taps", taps},
                               {"blob_doubles", blob_doubles}};
        f << meta.dump() << "\n";
    }
    for (const RunRecord& r : records)
        for (const TapRecord& t : r.taps.taps)
            f.write(reinterpret_cast<const char*>(t.value.data()),
                    static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::vector<RunRecord> load_runs(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(f, line)) throw TruncationError("'" + path + "': empty archive");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': bad archive header: " + e.what());
    }
    if (header.value("format", "") != kRunsFormat)
        throw FormatError("'" + path + "' is not a run archive");
    if (header.value("version", -1) != kRunsVersion)
        throw VersionMismatch("'" + path + "': archive version " + header["version"].dump());

    const std::size_t n = header.at("n_records").get<std::size_t>();
    std::vector<RunRecord> records(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(f, line))
            throw TruncationError("'" + path + "': metadata ends at record " + std::to_string(i));
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("'" + path + "': bad record metadata: " + e.what());
        }
        RunRecord& r = records[i];
        r.group_id = meta.at("group_id").get<std::size_t>();
        r.emotion = meta.at("emotion").get<std::string>();
        r.valence = meta.at("valence").get<std::string>();
        r.prompt = meta.at("prompt").get<std::vector<TokenId>>();
        r.generated = meta.at("generated").get<std::vector<TokenId>>();
        r.success = success_from_name(meta.at("success").get<std::string>());
        r.taps.sample_id = meta.at("sample_id").get<std::string>();
        r.taps.emotion = r.emotion;
        r.taps.edit_plan_hash = meta.at("edit_plan_hash").get<std::uint64_t>();
        std::size_t declared = 0;
        for (const auto& t : meta.at("taps")) {
            TapRecord tap;
            tap.point.layer = t.at("layer").get<std::size_t>();
            tap.point.site = site_from_name(t.at("site").get<std::string>());
            tap.point.position = t.at("position").get<std::string>() == "current"
                                     ? PositionPolicy::CurrentToken
                                     : PositionPolicy::LastPromptToken;
            tap.value.resize(t.at("len").get<std::size_t>());
            declared += tap.value.size();
            r.taps.taps.push_back(std::move(tap));
        }
        if (declared != meta.at("blob_doubles").get<std::size_t>())
            throw FormatError("'" + path + "': record " + std::to_string(i) +
                              " blob length disagrees with tap directory");
    }
    for (RunRecord& r : records)
        for (TapRecord& t : r.taps.taps) {
            f.read(reinterpret_cast<char*>(t.value.data()),
                   static_cast<std::streamsize>(t.value.size() * sizeof(double)));
            if (!f)
                throw TruncationError("'" + path + "': activation blobs cut short at record " +
                                      r.taps.sample_id);
        }
    return records;
}

}  // namespace emocirc
