#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "damoe/analysis.hpp"
#include "damoe/checkpoint.hpp"
#include "damoe/config.hpp"
#include "damoe/error.hpp"
#include "damoe/metrics.hpp"
#include "damoe/trainer.hpp"

namespace {

int run_train(const std::string& config_path, const std::string& out_dir) {
    const damoe::RunConfig run = damoe::parse_run_config(config_path);
    const damoe::TrainOutcome outcome = damoe::train_run(run, out_dir);
    std::cout << "steps " << outcome.metrics.size() << "\n";
    if (!outcome.metrics.empty()) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "initial_loss %.6f\n", outcome.initial_loss);
        std::cout << buf;
        std::snprintf(buf, sizeof buf, "final_loss %.6f\n", outcome.final_loss);
        std::cout << buf;
    }
    std::cout << "checkpoint " << out_dir << "/model.ckpt\n";
    std::cout << "metrics " << out_dir << "/metrics.jsonl\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path) {
    const damoe::Checkpoint ckpt = damoe::read_checkpoint(ckpt_path);
    std::cout << damoe::render_eval(damoe::evaluate_checkpoint(ckpt, data_path));
    return 0;
}

int run_importance(const std::string& ckpt_path, const std::string& text, bool csv) {
    const damoe::Checkpoint ckpt = damoe::read_checkpoint(ckpt_path);
    damoe::Model<float> model = damoe::restore_model(ckpt);
    const damoe::Tokenizer tok = damoe::tokenizer_from_checkpoint(ckpt);
    const damoe::ImportanceReport report = damoe::export_importance(model, tok, text);
    if (csv)
        std::cout << damoe::importance_csv(report);
    else
        std::cout << damoe::importance_json(report) << "\n";
    return 0;
}

int run_compare(const std::vector<std::string>& files) {
    std::cout << damoe::render_summary(damoe::compare_runs(files));
    return 0;
}

int run_route_trace(const std::string& ckpt_path, const std::string& data_path) {
    const damoe::Checkpoint ckpt = damoe::read_checkpoint(ckpt_path);
    damoe::Model<float> model = damoe::restore_model(ckpt);
    const damoe::Tokenizer tok = damoe::tokenizer_from_checkpoint(ckpt);
    const std::string task = ckpt.config_value("task");
    const std::string found = damoe::sniff_task(data_path);
    if (task != found)
        throw damoe::ConfigError("checkpoint was trained for task '" + task + "' but '" +
                                 data_path + "' holds different data");
    const damoe::Batch batch = damoe::first_eval_batch(ckpt, tok, data_path);
    for (const std::string& line : damoe::route_trace_lines(model, batch)) std::cout << line << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixture-of-experts trainer with attention-driven expert allocation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, data_path, text;
    std::vector<std::string> compare_files;
    bool as_json = false, as_csv = false;

    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "key=value run configuration")->required();
    train->add_option("--out", out_dir, "output directory for checkpoint and metrics")->required();

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a data file");
    eval->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();
    eval->add_option("--data", data_path, "corpus or labelled TSV to score")->required();

    CLI::App* importance = app.add_subcommand("importance", "per-token importance and expert allocation");
    importance->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();
    importance->add_option("--text", text, "text to analyze")->required();
    CLI::Option* jopt = importance->add_flag("--json", as_json, "emit JSON (default)");
    importance->add_flag("--csv", as_csv, "emit CSV")->excludes(jopt);

    CLI::App* compare = app.add_subcommand("compare", "summarize metrics files side by side");
    compare->add_option("files", compare_files, "metrics.jsonl files")->required()->expected(-1);

    CLI::App* trace = app.add_subcommand("route-trace", "routing decisions over one eval batch");
    trace->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();
    trace->add_option("--data", data_path, "data file to draw the batch from")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) return run_train(config_path, out_dir);
        if (eval->parsed()) return run_eval(ckpt_path, data_path);
        if (importance->parsed()) return run_importance(ckpt_path, text, as_csv);
        if (compare->parsed()) return run_compare(compare_files);
        if (trace->parsed()) return run_route_trace(ckpt_path, data_path);
    } catch (const damoe::NumericalAbort& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const damoe::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const damoe::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
