#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "damoe/checkpoint.hpp"
#include "damoe/config.hpp"
#include "damoe/data.hpp"
#include "damoe/error.hpp"
#include "damoe/metrics.hpp"
#include "damoe/model.hpp"
#include "damoe/optim.hpp"
#include "damoe/tokenizer.hpp"

namespace damoe {

/// Stream index for the batch-sampling RNG; parameter init uses the parameter
/// index as its stream, so this just has to sit far above any parameter count.
inline constexpr std::uint64_t kDataStream = 0x00DA7A57ULL;

/// One model-ready batch. For lm runs targets hold one id per position; for
/// classification they hold one label per sequence.
struct Batch {
    std::vector<int> ids;
    std::vector<std::uint8_t> valid;
    std::vector<int> targets;
    int B = 0;
    int L = 0;
};

struct LmData {
    Tokenizer tok;
    std::vector<int> train_ids;
    std::vector<int> valid_ids;
};

struct SentimentData {
    Tokenizer tok;
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> eval;
};

inline LmData prepare_lm_data(const std::string& path, TokenizerMode mode, int seq_len) {
    const Corpus corpus = ingest(path);
    LmData d;
    d.tok = Tokenizer::fit(mode, corpus.train_text());
    d.train_ids = d.tok.encode(corpus.train_text());
    d.valid_ids = d.tok.encode(corpus.valid_text());
    if (static_cast<int>(d.train_ids.size()) <= seq_len)
        throw DataError("training split of '" + path + "' has " +
                        std::to_string(d.train_ids.size()) + " tokens; need more than seq_len=" +
                        std::to_string(seq_len));
    return d;
}

inline SentimentData prepare_sentiment_data(const std::string& path, TokenizerMode mode) {
    const std::vector<LabeledExample> all = load_sentiment_tsv(path);
    SentimentData d;
    split_examples(all, d.train, d.eval);
    std::string joined;
    for (const LabeledExample& ex : d.train) {
        joined += ex.text;
        joined += '\n';
    }
    d.tok = Tokenizer::fit(mode, joined);
    return d;
}

/// B random length-(L+1) windows; inputs are the first L tokens, targets the
/// last L. Consumes exactly B draws from rng.
inline Batch sample_lm_batch(const std::vector<int>& ids, int B, int L, Rng& rng) {
    const int n = static_cast<int>(ids.size());
    if (n <= L) throw DataError("token stream shorter than seq_len + 1");
    Batch batch;
    batch.B = B;
    batch.L = L;
    batch.valid.assign(static_cast<std::size_t>(B) * L, 1);
    for (int b = 0; b < B; ++b) {
        const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - L)));
        for (int i = 0; i < L; ++i) {
            batch.ids.push_back(ids[static_cast<std::size_t>(start + i)]);
            batch.targets.push_back(ids[static_cast<std::size_t>(start + i + 1)]);
        }
    }
    return batch;
}

/// Non-overlapping eval windows starting at the given offsets. Short tails are
/// padded; padded positions carry target -1 so the loss skips them.
inline Batch make_lm_eval_batch(const std::vector<int>& ids, const std::vector<int>& starts, int L) {
    const int n = static_cast<int>(ids.size());
    Batch batch;
    batch.B = static_cast<int>(starts.size());
    batch.L = L;
    for (int start : starts) {
        if (start < 0 || start + 1 >= n) throw ContractError("eval window start out of range");
        for (int i = 0; i < L; ++i) {
            const bool in = start + i + 1 < n;
            batch.ids.push_back(in ? ids[static_cast<std::size_t>(start + i)] : Tokenizer::kPad);
            batch.valid.push_back(in ? 1 : 0);
            batch.targets.push_back(in ? ids[static_cast<std::size_t>(start + i + 1)] : -1);
        }
    }
    return batch;
}

/// Packs labelled texts into one batch: CLS + tokens, truncated to l_max and
/// padded to the longest sequence present.
inline Batch make_classifier_batch(const std::vector<LabeledExample>& examples,
                                   const Tokenizer& tok, int l_max) {
    if (examples.empty()) throw ContractError("classifier batch needs at least one example");
    std::vector<std::vector<int>> rows;
    int L = 1;
    for (const LabeledExample& ex : examples) {
        std::vector<int> ids{Tokenizer::kCls};
        for (int id : tok.encode(ex.text)) ids.push_back(id);
        if (static_cast<int>(ids.size()) > l_max) ids.resize(static_cast<std::size_t>(l_max));
        L = std::max(L, static_cast<int>(ids.size()));
        rows.push_back(std::move(ids));
    }
    Batch batch;
    batch.B = static_cast<int>(examples.size());
    batch.L = L;
    for (std::size_t b = 0; b < rows.size(); ++b) {
        for (int i = 0; i < L; ++i) {
            const bool in = i < static_cast<int>(rows[b].size());
            batch.ids.push_back(in ? rows[b][static_cast<std::size_t>(i)] : Tokenizer::kPad);
            batch.valid.push_back(in ? 1 : 0);
        }
        batch.targets.push_back(examples[b].label);
    }
    return batch;
}

/// Routing aggregates of one forward pass, pooled across blocks.
struct RouteAggregates {
    double mean_k = 0.0;
    double drop_rate = 0.0;
    std::vector<long long> expert_load;
};

template <typename T>
RouteAggregates aggregate_routes(const ForwardResult<T>& fwd) {
    RouteAggregates agg;
    long long assigned = 0, dropped = 0, live = 0;
    for (const BlockTrace<T>& blk : fwd.blocks) {
        const RoutingPlan<T>& plan = blk.plan;
        if (agg.expert_load.empty()) agg.expert_load.assign(static_cast<std::size_t>(plan.num_experts), 0);
        for (std::size_t t = 0; t < plan.counts.size(); ++t) {
            assigned += plan.counts[t];
            if (plan.counts[t] > 0) ++live;
        }
        for (int t = 0; t < plan.expert_mask.dim(0); ++t)
            for (int e = 0; e < plan.num_experts; ++e) {
                agg.expert_load[static_cast<std::size_t>(e)] += plan.expert_mask.at(t, e);
                dropped += plan.dropped.at(t, e);
            }
    }
    if (live > 0) agg.mean_k = static_cast<double>(assigned) / static_cast<double>(live);
    if (assigned > 0) agg.drop_rate = static_cast<double>(dropped) / static_cast<double>(assigned);
    return agg;
}

struct TrainOutcome {
    Checkpoint checkpoint;
    std::vector<StepMetrics> metrics;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

namespace detail {

inline void dump_nan_report(const std::string& out_dir, int step, double loss, const Batch& batch) {
    nlohmann::json j;
    j["step"] = step;
    j["loss"] = std::isnan(loss) ? "nan" : "inf";
    j["batch_ids"] = batch.ids;
    j["batch_targets"] = batch.targets;
    const std::string path = out_dir + "/nan_dump.json";
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
}

} // namespace detail

/// Runs one full training job and leaves metrics.jsonl plus model.ckpt in
/// out_dir. A non-finite loss writes nan_dump.json there and aborts.
inline TrainOutcome train_run(const RunConfig& run_in, const std::string& out_dir) {
    RunConfig run = run_in;
    const bool lm = run.task == "lm";
    run.model.head = lm ? HeadKind::lm : HeadKind::classifier;
    run.model.causal = lm;
    const TokenizerMode mode =
        run.tokenizer == "char" ? TokenizerMode::chars : TokenizerMode::whitespace;

    LmData lm_data;
    SentimentData cls_data;
    const Tokenizer* tok = nullptr;
    if (lm) {
        lm_data = prepare_lm_data(run.data_path, mode, run.seq_len);
        tok = &lm_data.tok;
    } else {
        cls_data = prepare_sentiment_data(run.data_path, mode);
        tok = &cls_data.tok;
    }
    run.model.vocab_size = tok->vocab_size();
    run.validate();

    std::filesystem::create_directories(out_dir);
    std::ofstream metrics_file(out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!metrics_file) throw DataError("cannot write metrics in '" + out_dir + "'");

    Model<float> model(run.model);
    AdamState<float> adam(model.params());
    Rng rng(derive_seed(run.model.seed, kDataStream));
    const auto started = std::chrono::steady_clock::now();

    TrainOutcome outcome;
    for (int step = 1; step <= run.steps; ++step) {
        Batch batch;
        if (lm) {
            batch = sample_lm_batch(lm_data.train_ids, run.batch_size, run.seq_len, rng);
        } else {
            std::vector<LabeledExample> picked;
            for (int b = 0; b < run.batch_size; ++b)
                picked.push_back(cls_data.train[rng.uniform_int(cls_data.train.size())]);
            batch = make_classifier_batch(picked, *tok, run.model.l_max);
        }

        Graph<float> g;
        ForwardResult<float> fwd = model.forward(g, batch.ids, batch.valid, batch.B, batch.L);
        Var<float> data_loss = g.cross_entropy_mean(fwd.logits, batch.targets);
        Var<float> loss = fwd.has_aux() ? g.add(data_loss, fwd.aux_loss) : data_loss;

        const double loss_val = loss.value()[0];
        if (!std::isfinite(loss_val)) {
            detail::dump_nan_report(out_dir, step, loss_val, batch);
            throw NumericalAbort("non-finite loss at step " + std::to_string(step) +
                                 "; details in " + out_dir + "/nan_dump.json");
        }

        model.zero_grad();
        g.backward(loss);
        adam_step(model.params(), adam, run.adam);

        const RouteAggregates agg = aggregate_routes(fwd);
        StepMetrics m;
        m.step = step;
        m.loss = loss_val;
        m.perplexity = std::exp(static_cast<double>(data_loss.value()[0]));
        m.mean_k = agg.mean_k;
        m.drop_rate = agg.drop_rate;
        m.expert_load = agg.expert_load;
        m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        metrics_file << metrics_line(m) << '\n';
        outcome.metrics.push_back(std::move(m));
    }
    metrics_file.close();

    outcome.checkpoint = snapshot_model(model, &adam);
    outcome.checkpoint.set_config("task", run.task);
    outcome.checkpoint.set_config("tokenizer_vocab", tok->to_json());
    outcome.checkpoint.set_config("seq_len", std::to_string(run.seq_len));
    outcome.checkpoint.set_config("batch_size", std::to_string(run.batch_size));
    outcome.checkpoint.set_config("steps", std::to_string(run.steps));
    outcome.checkpoint.set_config("data_rng_state", std::to_string(rng.state()));
    write_checkpoint(outcome.checkpoint, out_dir + "/model.ckpt");

    if (!outcome.metrics.empty()) {
        outcome.initial_loss = outcome.metrics.front().loss;
        outcome.final_loss = outcome.metrics.back().loss;
    }
    return outcome;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    std::string task;
    // lm
    double loss = 0.0;
    double perplexity = 0.0;
    long long tokens = 0;
    // sentiment
    double accuracy = 0.0;
    double f1 = 0.0;
    int correct = 0;
    int total = 0;
};

/// Classifies a data file by shape: "<0|1>\t..." on the first non-empty line
/// means labelled sentiment rows, anything else is treated as raw text.
inline std::string sniff_task(const std::string& path) {
    const std::string text = read_text_file(path);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.size() >= 2 && (line[0] == '0' || line[0] == '1') && line[1] == '\t')
            return "sentiment";
        return "lm";
    }
    throw DataError("'" + path + "' is empty");
}

/// Mean next-token NLL over the validation split, every token predicted once.
inline EvalResult evaluate_lm(Model<float>& model, const Tokenizer& tok,
                              const std::string& corpus_path, int seq_len, int batch_size) {
    const Corpus corpus = ingest(corpus_path);
    const std::vector<int> ids = tok.encode(corpus.valid_text());
    const int n = static_cast<int>(ids.size());
    if (n < 2) throw DataError("validation split of '" + corpus_path + "' is too small to score");

    std::vector<int> starts;
    for (int s = 0; s + 1 < n; s += seq_len) starts.push_back(s);

    EvalResult r;
    r.task = "lm";
    double total_nll = 0.0;
    for (std::size_t at = 0; at < starts.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(at + static_cast<std::size_t>(batch_size), starts.size());
        const std::vector<int> chunk(starts.begin() + static_cast<std::ptrdiff_t>(at),
                                     starts.begin() + static_cast<std::ptrdiff_t>(stop));
        Batch batch = make_lm_eval_batch(ids, chunk, seq_len);
        Graph<float> g;
        ForwardResult<float> fwd = model.forward(g, batch.ids, batch.valid, batch.B, batch.L);
        Var<float> loss = g.cross_entropy_mean(fwd.logits, batch.targets);
        long long live = 0;
        for (int t : batch.targets)
            if (t >= 0) ++live;
        total_nll += static_cast<double>(loss.value()[0]) * static_cast<double>(live);
        r.tokens += live;
    }
    r.loss = total_nll / static_cast<double>(r.tokens);
    r.perplexity = std::exp(r.loss);
    return r;
}

/// Accuracy and positive-class F1 over the held-out sentiment split.
inline EvalResult evaluate_sentiment(Model<float>& model, const Tokenizer& tok,
                                     const std::string& tsv_path, int batch_size) {
    SentimentData data = prepare_sentiment_data(tsv_path, tok.mode());
    EvalResult r;
    r.task = "sentiment";
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t at = 0; at < data.eval.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(at + static_cast<std::size_t>(batch_size), data.eval.size());
        const std::vector<LabeledExample> chunk(data.eval.begin() + static_cast<std::ptrdiff_t>(at),
                                                data.eval.begin() + static_cast<std::ptrdiff_t>(stop));
        Batch batch = make_classifier_batch(chunk, tok, model.config().l_max);
        Graph<float> g;
        ForwardResult<float> fwd = model.forward(g, batch.ids, batch.valid, batch.B, batch.L);
        const Tensor<float>& logits = fwd.logits.value();
        for (int b = 0; b < batch.B; ++b) {
            const int pred = logits.at(b, 1) > logits.at(b, 0) ? 1 : 0;
            const int gold = batch.targets[static_cast<std::size_t>(b)];
            if (pred == gold) ++r.correct;
            if (pred == 1 && gold == 1) ++tp;
            if (pred == 1 && gold == 0) ++fp;
            if (pred == 0 && gold == 1) ++fn;
            ++r.total;
        }
    }
    r.accuracy = r.total > 0 ? static_cast<double>(r.correct) / r.total : 0.0;
    const double denom = 2.0 * tp + fp + fn;
    r.f1 = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    return r;
}

inline Tokenizer tokenizer_from_checkpoint(const Checkpoint& ckpt) {
    return Tokenizer::from_json(ckpt.config_value("tokenizer_vocab"));
}

/// Restores the model and scores it on data whose format must match the task
/// the checkpoint was trained for.
inline EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const std::string& data_path) {
    const std::string task = ckpt.config_value("task");
    const std::string found = sniff_task(data_path);
    if (task != found)
        throw ConfigError("checkpoint was trained for task '" + task + "' but '" + data_path +
                          "' looks like " + (found == "sentiment" ? "labelled sentiment rows" : "raw text"));
    Model<float> model = restore_model(ckpt);
    const Tokenizer tok = tokenizer_from_checkpoint(ckpt);
    const int batch_size = std::stoi(ckpt.config_value("batch_size"));
    if (task == "lm")
        return evaluate_lm(model, tok, data_path, std::stoi(ckpt.config_value("seq_len")), batch_size);
    return evaluate_sentiment(model, tok, data_path, batch_size);
}

inline std::string render_eval(const EvalResult& r) {
    std::ostringstream out;
    if (r.task == "lm") {
        out << "task lm\n";
        out << "tokens " << r.tokens << "\n";
        char buf[64];
        std::snprintf(buf, sizeof buf, "loss %.6f\n", r.loss);
        out << buf;
        std::snprintf(buf, sizeof buf, "perplexity %.6f\n", r.perplexity);
        out << buf;
    } else {
        out << "task sentiment\n";
        out << "examples " << r.total << "\n";
        char buf[64];
        std::snprintf(buf, sizeof buf, "accuracy %.6f\n", r.accuracy);
        out << buf;
        std::snprintf(buf, sizeof buf, "f1 %.6f\n", r.f1);
        out << buf;
    }
    return out.str();
}

} // namespace damoe
