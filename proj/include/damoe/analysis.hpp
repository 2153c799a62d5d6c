#pragma once

#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "damoe/checkpoint.hpp"
#include "damoe/error.hpp"
#include "damoe/model.hpp"
#include "damoe/tokenizer.hpp"
#include "damoe/trainer.hpp"

namespace damoe {

/// One token's routing decision inside one block.
struct ImportanceRecord {
    int block = 0;
    int position = 0;
    std::string token;
    double importance = 0.0;
    int k = 0;
    std::vector<int> experts;
    std::vector<double> gates;
};

struct ImportanceReport {
    std::vector<std::string> tokens;
    std::vector<ImportanceRecord> records;  // block-major, then position
    std::vector<Tensor<float>> attention;   // per block, [1, H, L, L]
};

/// Runs the model over one piece of text and exports every block's attention
/// weights, importance scores and expert choices.
inline ImportanceReport export_importance(Model<float>& model, const Tokenizer& tok,
                                          const std::string& text) {
    std::vector<int> ids;
    if (model.config().head == HeadKind::classifier) ids.push_back(Tokenizer::kCls);
    for (int id : tok.encode(text)) ids.push_back(id);
    if (ids.empty()) throw UsageError("no text to analyze");
    if (static_cast<int>(ids.size()) > model.config().l_max)
        throw DataError("text produces " + std::to_string(ids.size()) +
                        " tokens; the model caps sequences at " + std::to_string(model.config().l_max));

    const int L = static_cast<int>(ids.size());
    const std::vector<std::uint8_t> valid(static_cast<std::size_t>(L), 1);
    Graph<float> g;
    ForwardResult<float> fwd = model.forward(g, ids, valid, 1, L);

    ImportanceReport report;
    for (int i = 0; i < L; ++i) report.tokens.push_back(tok.token(ids[static_cast<std::size_t>(i)]));
    for (std::size_t blk = 0; blk < fwd.blocks.size(); ++blk) {
        const BlockTrace<float>& trace = fwd.blocks[blk];
        report.attention.push_back(trace.attention);
        for (int t = 0; t < L; ++t) {
            ImportanceRecord rec;
            rec.block = static_cast<int>(blk);
            rec.position = t;
            rec.token = report.tokens[static_cast<std::size_t>(t)];
            rec.importance = trace.plan.importance[static_cast<std::size_t>(t)];
            rec.k = trace.plan.counts[static_cast<std::size_t>(t)];
            for (int e : trace.plan.expert_index[static_cast<std::size_t>(t)]) rec.experts.push_back(e);
            for (float gate : trace.plan.expert_gate[static_cast<std::size_t>(t)])
                rec.gates.push_back(static_cast<double>(gate));
            report.records.push_back(std::move(rec));
        }
    }
    return report;
}

inline nlohmann::json importance_record_json(const ImportanceRecord& rec) {
    nlohmann::json j;
    j["block"] = rec.block;
    j["position"] = rec.position;
    j["token"] = rec.token;
    j["importance"] = rec.importance;
    j["k"] = rec.k;
    j["experts"] = rec.experts;
    j["gates"] = rec.gates;
    return j;
}

inline std::string importance_json(const ImportanceReport& report) {
    nlohmann::json j;
    j["tokens"] = report.tokens;
    nlohmann::json records = nlohmann::json::array();
    for (const ImportanceRecord& rec : report.records) records.push_back(importance_record_json(rec));
    j["records"] = records;
    nlohmann::json blocks = nlohmann::json::array();
    for (const Tensor<float>& a : report.attention) {
        const int H = a.dim(1), L = a.dim(2);
        nlohmann::json heads = nlohmann::json::array();
        for (int h = 0; h < H; ++h) {
            nlohmann::json rows = nlohmann::json::array();
            for (int i = 0; i < L; ++i) {
                nlohmann::json row = nlohmann::json::array();
                for (int k = 0; k < L; ++k) row.push_back(a.at(0, h, i, k));
                rows.push_back(std::move(row));
            }
            heads.push_back(std::move(rows));
        }
        blocks.push_back(std::move(heads));
    }
    j["attention"] = blocks;
    return j.dump();
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

} // namespace detail

inline std::string importance_csv(const ImportanceReport& report) {
    std::ostringstream out;
    out << "block,position,token,importance,k,experts,gates\n";
    char buf[64];
    for (const ImportanceRecord& rec : report.records) {
        out << rec.block << ',' << rec.position << ',' << detail::csv_field(rec.token) << ',';
        std::snprintf(buf, sizeof buf, "%.9g", rec.importance);
        out << buf << ',' << rec.k << ',';
        for (std::size_t i = 0; i < rec.experts.size(); ++i)
            out << (i ? ";" : "") << rec.experts[i];
        out << ',';
        for (std::size_t i = 0; i < rec.gates.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.9g", rec.gates[i]);
            out << (i ? ";" : "") << buf;
        }
        out << '\n';
    }
    return out.str();
}

/// JSON lines describing each live token's routing over one batch: chosen
/// experts, gates, and which assignments the capacity limit discarded.
inline std::vector<std::string> route_trace_lines(Model<float>& model, const Batch& batch) {
    Graph<float> g;
    ForwardResult<float> fwd = model.forward(g, batch.ids, batch.valid, batch.B, batch.L);
    std::vector<std::string> lines;
    for (std::size_t blk = 0; blk < fwd.blocks.size(); ++blk) {
        const RoutingPlan<float>& plan = fwd.blocks[blk].plan;
        for (int t = 0; t < batch.B * batch.L; ++t) {
            if (!batch.valid[static_cast<std::size_t>(t)]) continue;
            nlohmann::json j;
            j["block"] = static_cast<int>(blk);
            j["sequence"] = t / batch.L;
            j["position"] = t % batch.L;
            j["importance"] = plan.importance[static_cast<std::size_t>(t)];
            j["k"] = plan.counts[static_cast<std::size_t>(t)];
            j["experts"] = plan.expert_index[static_cast<std::size_t>(t)];
            std::vector<double> gates;
            for (float gate : plan.expert_gate[static_cast<std::size_t>(t)])
                gates.push_back(static_cast<double>(gate));
            j["gates"] = gates;
            std::vector<int> dropped;
            for (int e = 0; e < plan.num_experts; ++e)
                if (plan.dropped.at(t, e)) dropped.push_back(e);
            j["dropped"] = dropped;
            lines.push_back(j.dump());
        }
    }
    return lines;
}

/// First evaluation batch for a restored checkpoint, matching the shapes the
/// model was trained with.
inline Batch first_eval_batch(const Checkpoint& ckpt, const Tokenizer& tok,
                              const std::string& data_path) {
    const std::string task = ckpt.config_value("task");
    const int batch_size = std::stoi(ckpt.config_value("batch_size"));
    if (task == "lm") {
        const int seq_len = std::stoi(ckpt.config_value("seq_len"));
        const Corpus corpus = ingest(data_path);
        const std::vector<int> ids = tok.encode(corpus.valid_text());
        if (static_cast<int>(ids.size()) < 2)
            throw DataError("validation split of '" + data_path + "' is too small to trace");
        std::vector<int> starts;
        for (int s = 0; s + 1 < static_cast<int>(ids.size()) &&
                        static_cast<int>(starts.size()) < batch_size;
             s += seq_len)
            starts.push_back(s);
        return make_lm_eval_batch(ids, starts, seq_len);
    }
    SentimentData data = prepare_sentiment_data(data_path, tok.mode());
    const std::size_t n = std::min(data.eval.size(), static_cast<std::size_t>(batch_size));
    const std::vector<LabeledExample> chunk(data.eval.begin(),
                                            data.eval.begin() + static_cast<std::ptrdiff_t>(n));
    return make_classifier_batch(chunk, tok, std::stoi(ckpt.config_value("l_max")));
}

} // namespace damoe
