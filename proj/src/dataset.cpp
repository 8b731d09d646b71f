#include "mega/dataset.hpp"

#include "mega/rng.hpp"
#include "mega/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>

namespace mega::eval {

using nlohmann::json;

void EditCase::validate() const {
    if (prompt.empty()) throw Error("EditCase " + case_id + ": empty prompt");
    if (target_new.empty()) throw Error("EditCase " + case_id + ": empty target_new");
    if (target_new == ground_truth) {
        throw Error("EditCase " + case_id + ": target_new equals ground_truth");
    }
}

namespace {

std::vector<std::string> string_list(const json& j, const char* key) {
    std::vector<std::string> out;
    if (!j.contains(key) || j.at(key).is_null()) return out;
    const json& v = j.at(key);
    if (v.is_string()) {
        out.push_back(v.get<std::string>());
    } else if (v.is_array()) {
        for (const json& e : v) out.push_back(e.get<std::string>());
    } else {
        throw Error(std::string("dataset: field ") + key + " must be a string or list");
    }
    return out;
}

std::vector<RippleTest> ripple_list(const json& j, const char* key) {
    std::vector<RippleTest> out;
    if (!j.contains(key) || j.at(key).is_null()) return out;
    for (const json& e : j.at(key)) {
        RippleTest t;
        t.prompt = e.at("prompt").get<std::string>();
        if (e.contains("answers")) {
            for (const json& a : e.at("answers")) t.answers.push_back(a.get<std::string>());
        } else if (e.contains("answer")) {
            t.answers.push_back(e.at("answer").get<std::string>());
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::string id_string(const json& j, size_t line_no) {
    if (j.contains("case_id")) {
        const json& id = j.at("case_id");
        if (id.is_string()) return id.get<std::string>();
        if (id.is_number_integer()) return std::to_string(id.get<long long>());
    }
    return "case_" + std::to_string(line_no);
}

EditCase parse_case(const json& j, size_t line_no) {
    EditCase c;
    c.case_id = id_string(j, line_no);
    c.prompt = j.value("prompt", std::string{});
    c.subject = j.value("subject", std::string{});
    c.ground_truth = j.value("ground_truth", std::string{});
    c.target_new = j.value("target_new", std::string{});
    c.paraphrase_prompts = string_list(j, "paraphrase_prompts");
    if (j.contains("locality_probes")) {
        for (const json& e : j.at("locality_probes")) {
            c.locality_probes.push_back(
                {e.at("prompt").get<std::string>(), e.value("answer", std::string{})});
        }
    }
    if (j.contains("ripple_tests") && !j.at("ripple_tests").is_null()) {
        const json& r = j.at("ripple_tests");
        c.ripple_tests.ci = ripple_list(r, "ci");
        c.ripple_tests.cii = ripple_list(r, "cii");
        c.ripple_tests.rs = ripple_list(r, "rs");
        c.ripple_tests.sa = ripple_list(r, "sa");
    }
    c.implication_prompts = string_list(j, "implication_prompts");
    c.validate();
    return c;
}

json case_to_json(const EditCase& c) {
    json j;
    j["case_id"] = c.case_id;
    j["prompt"] = c.prompt;
    j["subject"] = c.subject;
    j["ground_truth"] = c.ground_truth;
    j["target_new"] = c.target_new;
    j["paraphrase_prompts"] = c.paraphrase_prompts;
    json probes = json::array();
    for (const LocalityProbe& p : c.locality_probes) {
        probes.push_back({{"prompt", p.prompt}, {"answer", p.answer}});
    }
    j["locality_probes"] = probes;
    auto ripple = [](const std::vector<RippleTest>& tests) {
        json arr = json::array();
        for (const RippleTest& t : tests) {
            arr.push_back({{"prompt", t.prompt}, {"answers", t.answers}});
        }
        return arr;
    };
    j["ripple_tests"] = {{"ci", ripple(c.ripple_tests.ci)},
                         {"cii", ripple(c.ripple_tests.cii)},
                         {"rs", ripple(c.ripple_tests.rs)},
                         {"sa", ripple(c.ripple_tests.sa)}};
    j["implication_prompts"] = c.implication_prompts;
    return j;
}

} // namespace

std::vector<EditCase> load_cases_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("dataset: cannot open " + path);
    std::vector<EditCase> cases;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error("dataset: " + path + " line " + std::to_string(line_no) +
                        " is not valid JSON: " + e.what());
        }
        try {
            cases.push_back(parse_case(j, line_no));
        } catch (const json::exception& e) {
            throw Error("dataset: " + path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cases;
}

void save_cases_jsonl(const std::string& path, const std::vector<EditCase>& cases) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("dataset: cannot write " + path);
    for (const EditCase& c : cases) out << case_to_json(c).dump() << '\n';
}

std::vector<EditCase> sample_cases(std::vector<EditCase> cases, size_t limit, Sampling sampling,
                                   uint64_t seed) {
    if (limit == 0 || limit >= cases.size()) return cases;
    if (sampling == Sampling::FirstN) {
        cases.resize(limit);
        return cases;
    }
    // Seeded Fisher-Yates over indices, then restore file order.
    std::vector<size_t> idx(cases.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    num::Rng rng(seed);
    for (size_t i = idx.size() - 1; i > 0; --i) {
        std::swap(idx[i], idx[rng.below(i + 1)]);
    }
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
    std::vector<EditCase> out;
    out.reserve(limit);
    for (size_t i : idx) out.push_back(std::move(cases[i]));
    return out;
}

size_t convert_easyedit_counterfact(const std::string& in_path, const std::string& out_path) {
    std::ifstream in(in_path);
    if (!in) throw Error("convert: cannot open " + in_path);
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw Error("convert: " + in_path + " is not valid JSON: " + e.what());
    }
    if (!root.is_array()) throw Error("convert: expected a JSON array of cases");

    auto field_str = [](const json& j, const char* key) -> std::string {
        if (!j.contains(key)) return {};
        const json& v = j.at(key);
        if (v.is_string()) return v.get<std::string>();
        if (v.is_object() && v.contains("str")) return v.at("str").get<std::string>();
        return {};
    };

    std::vector<EditCase> cases;
    size_t i = 0;
    for (const json& rec0 : root) {
        ++i;
        // The original CounterFact release nests the rewrite under
        // "requested_rewrite"; EasyEdit flattens it.
        const json& rec = rec0.contains("requested_rewrite") ? rec0.at("requested_rewrite") : rec0;
        EditCase c;
        c.case_id = rec0.contains("case_id") ? id_string(rec0, i) : "cf_" + std::to_string(i);
        c.prompt = field_str(rec, "prompt");
        c.subject = field_str(rec, "subject");
        c.target_new = field_str(rec, "target_new");
        c.ground_truth = field_str(rec, "ground_truth");
        if (c.ground_truth.empty()) c.ground_truth = field_str(rec, "target_true");
        // "{}"-style prompts carry the subject placeholder.
        size_t ph = c.prompt.find("{}");
        if (ph != std::string::npos) c.prompt = c.prompt.replace(ph, 2, c.subject);

        for (const char* key : {"rephrase_prompt", "rephrase_prompts", "paraphrase_prompts"}) {
            for (std::string& s : string_list(rec0, key)) c.paraphrase_prompts.push_back(std::move(s));
        }
        std::vector<std::string> loc_prompts = string_list(rec0, "locality_prompt");
        std::vector<std::string> loc_answers = string_list(rec0, "locality_ground_truth");
        for (size_t p = 0; p < loc_prompts.size(); ++p) {
            c.locality_probes.push_back(
                {loc_prompts[p], p < loc_answers.size() ? loc_answers[p] : std::string{}});
        }
        c.validate();
        cases.push_back(std::move(c));
    }
    save_cases_jsonl(out_path, cases);
    return cases.size();
}

} // namespace mega::eval
