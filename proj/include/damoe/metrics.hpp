#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "damoe/data.hpp"
#include "damoe/error.hpp"

namespace damoe {

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double perplexity = 0.0;
    double mean_k = 0.0;
    double drop_rate = 0.0;
    std::vector<long long> expert_load;
    double wall_time = 0.0; // seconds since run start; excluded from determinism checks
};

inline std::string metrics_line(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["perplexity"] = m.perplexity;
    j["mean_k"] = m.mean_k;
    j["drop_rate"] = m.drop_rate;
    j["expert_load"] = m.expert_load;
    j["wall_time"] = m.wall_time;
    return j.dump();
}

inline std::vector<StepMetrics> read_metrics(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<StepMetrics> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad metrics json: " + e.what());
        }
        StepMetrics m;
        try {
            m.step = j.at("step").get<int>();
            m.loss = j.at("loss").get<double>();
            m.perplexity = j.at("perplexity").get<double>();
            m.mean_k = j.at("mean_k").get<double>();
            m.drop_rate = j.at("drop_rate").get<double>();
            m.expert_load = j.at("expert_load").get<std::vector<long long>>();
            m.wall_time = j.at("wall_time").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": missing metrics field: " + e.what());
        }
        out.push_back(std::move(m));
    }
    if (out.empty()) throw DataError("no metrics in '" + path + "'");
    return out;
}

struct RunSummary {
    std::vector<std::string> files;
    std::vector<double> final_loss;
    std::vector<double> final_perplexity;
    std::vector<double> mean_k;
    int final_step = 0;
    double mean_final_loss = 0.0;
};

/// Side-by-side comparison of metrics files; steps must align exactly.
inline RunSummary compare_runs(const std::vector<std::string>& paths) {
    if (paths.size() < 2) throw UsageError("compare needs at least two metrics files");
    RunSummary s;
    std::vector<int> steps;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const auto metrics = read_metrics(paths[i]);
        if (i == 0) {
            for (const StepMetrics& m : metrics) steps.push_back(m.step);
        } else {
            if (metrics.size() != steps.size())
                throw DataError("metrics files have different step counts: '" + paths[0] +
                                "' vs '" + paths[i] + "'");
            for (std::size_t k = 0; k < metrics.size(); ++k)
                if (metrics[k].step != steps[k])
                    throw DataError("misaligned steps between '" + paths[0] + "' and '" + paths[i] + "'");
        }
        s.files.push_back(paths[i]);
        s.final_loss.push_back(metrics.back().loss);
        s.final_perplexity.push_back(metrics.back().perplexity);
        s.mean_k.push_back(metrics.back().mean_k);
    }
    s.final_step = steps.empty() ? 0 : steps.back();
    double total = 0.0;
    for (double l : s.final_loss) total += l;
    s.mean_final_loss = total / static_cast<double>(s.final_loss.size());
    return s;
}

inline std::string render_summary(const RunSummary& s) {
    std::ostringstream out;
    out << "final step " << s.final_step << "\n";
    for (std::size_t i = 0; i < s.files.size(); ++i) {
        std::ostringstream row;
        row.setf(std::ios::fixed);
        row.precision(6);
        row << s.final_loss[i];
        out << "  " << s.files[i] << "  loss=" << row.str() << "  perplexity=" << s.final_perplexity[i]
            << "  mean_k=" << s.mean_k[i] << "\n";
    }
    std::ostringstream mean;
    mean.setf(std::ios::fixed);
    mean.precision(6);
    mean << s.mean_final_loss;
    out << "  mean final loss " << mean.str() << "\n";
    return out.str();
}

} // namespace damoe
