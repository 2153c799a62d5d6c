#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>

#include "damoe/data.hpp"
#include "damoe/error.hpp"
#include "damoe/model.hpp"
#include "damoe/optim.hpp"

namespace damoe {

/// Everything one training run needs. Model fields mirror ModelConfig;
/// vocab_size, head and causal are derived from the task and data.
struct RunConfig {
    ModelConfig model;
    std::string task = "lm"; // lm | sentiment
    std::string data_path;
    std::string tokenizer = "char"; // char | whitespace
    int steps = 500;
    int batch_size = 8;
    int seq_len = 64;
    AdamConfig adam;

    void validate() const {
        if (task != "lm" && task != "sentiment") throw ConfigError("task must be lm or sentiment");
        if (tokenizer != "char" && tokenizer != "whitespace")
            throw ConfigError("tokenizer must be char or whitespace");
        if (data_path.empty()) throw ConfigError("data path is required");
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (seq_len < 2 || seq_len > model.l_max) throw ConfigError("seq_len must lie in [2, l_max]");
        if (adam.lr <= 0.0) throw ConfigError("lr must be positive");
    }
};

inline std::map<std::string, std::string> parse_kv_text(const std::string& text,
                                                        const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t begin = line.find_first_not_of(" \t");
        if (begin == std::string::npos || line[begin] == '#') continue;
        const std::size_t eq = line.find('=', begin);
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(begin, eq - begin);
        std::string value = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
            std::size_t b = s.find_first_not_of(" \t");
            s = b == std::string::npos ? "" : s.substr(b);
        };
        strip(key);
        strip(value);
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError(origin + ": duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

inline RunConfig parse_run_config(const std::string& path) {
    const auto kv = parse_kv_text(read_text_file(path), path);
    RunConfig run;
    auto geti = [&](const std::string& v, const std::string& k) {
        try {
            std::size_t used = 0;
            const int r = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError(path + ": key '" + k + "' needs an integer, got '" + v + "'");
        }
    };
    auto getd = [&](const std::string& v, const std::string& k) {
        try {
            std::size_t used = 0;
            const double r = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError(path + ": key '" + k + "' needs a number, got '" + v + "'");
        }
    };
    auto getb = [&](const std::string& v, const std::string& k) {
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw ConfigError(path + ": key '" + k + "' needs a boolean, got '" + v + "'");
    };

    for (const auto& [key, value] : kv) {
        if (key == "task") run.task = value;
        else if (key == "data") run.data_path = value;
        else if (key == "tokenizer") run.tokenizer = value;
        else if (key == "steps") run.steps = geti(value, key);
        else if (key == "batch_size") run.batch_size = geti(value, key);
        else if (key == "seq_len") run.seq_len = geti(value, key);
        else if (key == "lr") run.adam.lr = getd(value, key);
        else if (key == "beta1") run.adam.beta1 = getd(value, key);
        else if (key == "beta2") run.adam.beta2 = getd(value, key);
        else if (key == "d_model") run.model.d_model = geti(value, key);
        else if (key == "d_ff") run.model.d_ff = geti(value, key);
        else if (key == "heads") run.model.heads = geti(value, key);
        else if (key == "blocks") run.model.blocks = geti(value, key);
        else if (key == "experts") run.model.experts = geti(value, key);
        else if (key == "l_max") run.model.l_max = geti(value, key);
        else if (key == "capacity_factor") run.model.capacity_factor = getd(value, key);
        else if (key == "router_mode") {
            if (value != "dynamic" && value != "fixed")
                throw ConfigError(path + ": router_mode must be dynamic or fixed");
            run.model.router_mode = value == "fixed" ? RouterMode::fixed : RouterMode::dynamic;
        } else if (key == "fixed_k") run.model.fixed_k = geti(value, key);
        else if (key == "activation") {
            if (value != "relu" && value != "gelu")
                throw ConfigError(path + ": activation must be relu or gelu");
            run.model.activation = value == "gelu" ? Activation::gelu : Activation::relu;
        } else if (key == "aux_loss_weight") run.model.aux_loss_weight = getd(value, key);
        else if (key == "renorm_gates") run.model.renorm_gates = getb(value, key);
        else if (key == "seed") run.model.seed = static_cast<std::uint64_t>(std::stoull(value));
        else throw ConfigError(path + ": unknown key '" + key + "'");
    }

    if (run.task == "lm") {
        run.model.head = HeadKind::lm;
        run.model.causal = true;
    } else {
        run.model.head = HeadKind::classifier;
        run.model.causal = false;
        run.model.num_classes = 2;
        if (!kv.count("tokenizer")) run.tokenizer = "whitespace";
    }
    if (run.seq_len > run.model.l_max) run.model.l_max = run.seq_len;
    run.validate();
    return run;
}

} // namespace damoe
